"""Build and cache pilot artifacts: dataset + benign/backdoored models."""
import sys, time
from pathlib import Path
import numpy as np
import torch

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset, export_dataset
from gazelab.models import build_model, train_model, TrainConfig, evaluate, save_checkpoint
from gazelab.attacks import TriggerSpec, PoisonConfig, poison_dataset

OUT = Path("/root/pilot")

def main():
    OUT.mkdir(exist_ok=True)
    cfg = SyntheticSceneConfig(image_size=64, sample_count=1250, noise_level=0.1, seed=11)
    samples = generate_synthetic_dataset(cfg)
    split = split_dataset(samples, (0.8, 0.1, 0.1), seed=1)
    export_dataset(split.train, OUT / "train")
    export_dataset(split.benign, OUT / "benign")
    export_dataset(split.test, OUT / "test")

    t0 = time.time()
    m = build_model(seed=3)
    train_model(m, split.train, TrainConfig(seed=3))
    save_checkpoint(m, OUT / "model_benign")
    print(f"benign model: {time.time()-t0:.0f}s err {evaluate(m, split.test):.2f}")

    spec = TriggerSpec("patch", target_label=(0.0, 0.0), params={"size": 6}, seed=7)
    poisoned = poison_dataset(split.train, spec, PoisonConfig(ratio=0.1, seed=5))
    t0 = time.time()
    m = build_model(seed=4)
    train_model(m, poisoned.samples, TrainConfig(seed=4))
    save_checkpoint(m, OUT / "model_backdoored")
    print(f"backdoored model: {time.time()-t0:.0f}s err {evaluate(m, split.test):.2f}")

if __name__ == "__main__":
    main()
