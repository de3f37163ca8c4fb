# %% [markdown]
# # A small training run
#
# Generates a synthetic three-class corpus, splits it 60/20/20, trains
# MRANet-S for a few epochs and reads back the curves and confusion matrix.
# Everything goes through the same functions the command line uses.

# %%
import tempfile
from pathlib import Path

from mranet.data import TaskSpec, make_task_subset, stratified_split, write_synthetic_corpus
from mranet.model import mranet_s
from mranet.trainer import TrainConfig, fit

work = Path(tempfile.mkdtemp(prefix="mranet_demo_"))
corpus = write_synthetic_corpus(work / "corpus", n_per_class=40, seed=1)
task = TaskSpec.for_k(3)
manifest = make_task_subset(stratified_split(corpus, seed=1), task)
print({s: len(manifest.split_samples(s)) for s in ("train", "val", "test")})

# %%
config = TrainConfig(model=mranet_s(3), task=task, learning_rate=1e-4, batch_size=32, epochs=5, seed=1)
trainlog, best = fit(config, manifest, work / "run")

# %% [markdown]
# ## Curves
# `train_log.csv` holds one row per epoch: the data behind accuracy and loss plots.

# %%
print(f"{'epoch':>5} {'train loss':>10} {'train acc':>9} {'val loss':>9} {'val acc':>7}")
for r in trainlog.rows:
    print(f"{r.epoch:>5} {r.train_loss:>10.4f} {r.train_acc:>9.3f} {r.val_loss:>9.4f} {r.val_acc:>7.3f}")
print("best epoch", best.best_epoch)

# %% [markdown]
# ## Held-out test split
# The best checkpoint is scored on the test split; rows of the confusion
# matrix are true classes.

# %%
print((work / "run" / "metrics.txt").read_text())
print((work / "run" / "confusion.csv").read_text())
