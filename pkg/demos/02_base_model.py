"""
A planted click corpus and the base click model
===============================================

The synthetic generator plants a logistic click model in which attribute
tokens, a latent ad cluster and user-cluster affinity all move the click
rate. Ads with many samples are "old" and train the base model; the rest are
cold-start ads.
"""

import numpy as np

from gme.ctr import BaseTrainConfig, make_batch, train_base
from gme.data import gen_synthetic, split_old_new
from gme.evaluate import auc

counts = np.r_[np.full(200, 120), np.full(50, 60)]
ds = gen_synthetic(len(counts), counts, n_attr_fields=3, attr_cardinality=60, click_model_seed=0)
print(len(ds), "samples, positive rate", round(ds.positive_rate(), 3))
print("fields:", [f"{f.name} ({f.role.value})" for f in ds.schema.fields])

old, new = split_old_new(ds, threshold=100)
print(len(old.ads()), "old ads,", len(new.ads()), "new ads")

# the base model embeds every field, concatenates and runs an MLP
model, history = train_base(old, BaseTrainConfig(dim=8, hidden=(32, 16), lr=0.005, epochs=3))
for row in history:
    print("epoch", row["epoch"], "loss", round(row["loss"], 4))
model.freeze()

# on new ads the ID embedding rows were never trained, so this is the cold-start gap
print("train AUC", round(auc(model.predict(make_batch(old)), old.labels), 4))
print("new-ad AUC with untrained ID rows", round(auc(model.predict(make_batch(new)), new.labels), 4))
