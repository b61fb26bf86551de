"""
Training the tiny variant end to end
====================================

Writes a throwaway image-folder dataset, trains the tiny preset for a few
epochs through the same code path the command line uses, and reloads the
best checkpoint.
"""

import tempfile
from pathlib import Path

from ctrlf.checkpoint import load_checkpoint
from ctrlf.data import ImageFolderData, scan_dataset, write_synthetic_folder
from ctrlf.model import TINY, build_model
from ctrlf.training import TrainConfig, evaluate, train

work = Path(tempfile.mkdtemp(prefix="ctrlf-demo-"))

# 4 classes of coloured noise, 12 images each, split 80/20 per class
root = write_synthetic_folder(work / "data", num_classes=4, per_class=12, size=32)
manifest = scan_dataset(root, resolution=32, cache_dir=work / "manifest")
print(f"{len(manifest.train)} train / {len(manifest.test)} test, mean {manifest.mean}")

cfg = TINY.replace(num_classes=manifest.num_classes)
model = build_model(cfg, seed=0)
print(f"{model.num_parameters()} parameters")

tc = TrainConfig(epochs=8, batch_size=8, base_lr=3e-3, min_lr=3e-5, warmup_epochs=1, augment=True)
result = train(model, ImageFolderData(manifest, "train"), ImageFolderData(manifest, "test"), tc,
               out_dir=work / "run", on_epoch=lambda r: print(
                   f"epoch {r['epoch']}  loss {r['train_loss']:.3f}  test {r['test_acc']:.2f}  lambda {r['lambda']:.2f}"))

# a fresh model with a different seed, restored from disk, scores the same
fresh = build_model(cfg, seed=99)
load_checkpoint(result.last_checkpoint, fresh)
print("restored:", evaluate(fresh, ImageFolderData(manifest, "test")))
print("original:", evaluate(model, ImageFolderData(manifest, "test")))
print("outputs under", work)
