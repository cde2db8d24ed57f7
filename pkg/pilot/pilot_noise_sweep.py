"""Sweep training noise augmentation; check attack + separation trend."""
import time, copy, sys
from pathlib import Path
import numpy as np
import torch

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset, images_array, angular_error_batch
from gazelab.models import build_model, train_model, TrainConfig, evaluate, images_to_tensor, predict, save_checkpoint
from gazelab.attacks import TriggerSpec, PoisonConfig, poison_dataset, trigger_transform
from gazelab.reverse import REConfig, TriggerGenerator, pretrain_generator, reverse_engineer
from gazelab.diagnostics import compute_diagnostics

OUT = Path("/root/pilot")

cfg = SyntheticSceneConfig(image_size=64, sample_count=1250, noise_level=0.1, seed=11)
samples = generate_synthetic_dataset(cfg)
split = split_dataset(samples, (0.8, 0.1, 0.1), seed=1)
spec = TriggerSpec("patch", target_label=(0.0, 0.0), params={"size": 6}, seed=7)
poisoned = poison_dataset(split.train, spec, PoisonConfig(ratio=0.1, seed=5))
transform = trigger_transform(spec)
trig = np.stack([transform(s.image) for s in split.test])

gen0 = TriggerGenerator(channels=3, width=4)
gen0.load_state_dict(torch.load(OUT / "gen_w4.pt", weights_only=True))

re_cfg = REConfig(steps=800, seed=100, pretrain_steps=0)

for sigma in (0.10, 0.15):
    benign_model = build_model(seed=3)
    train_model(benign_model, split.train, TrainConfig(augment_noise=sigma, seed=3))
    bd_model = build_model(seed=4)
    train_model(bd_model, poisoned.samples, TrainConfig(augment_noise=sigma, seed=4))
    ae = np.mean(angular_error_batch(predict(bd_model, trig), np.zeros((len(split.test), 2))))
    rep = compute_diagnostics(bd_model, images_array(split.test), trig)
    print(f"sigma={sigma}: benign-err {evaluate(benign_model, split.test):.2f} "
          f"bd-err {evaluate(bd_model, split.test):.2f} AE {ae:.2f} RAV {rep.rav:.4f}", flush=True)
    for name, model in [("benign", benign_model), ("backdoored", bd_model)]:
        t0 = time.time()
        res = reverse_engineer(model, split.benign, re_cfg, generator=copy.deepcopy(gen0))
        tr = res.loss_trace
        line = " ".join(f"{tr[i]['perturbation']:.0f}" for i in range(0, 800, 100))
        print(f"  {name}: {time.time()-t0:.0f}s avg_pert {res.average_perturbation:.1f} "
              f"traj [{line}] ov_end {tr[-1]['output_variance']:.2f}", flush=True)
    save_checkpoint(benign_model, OUT / f"model_benign_s{int(sigma*100)}")
    save_checkpoint(bd_model, OUT / f"model_backdoored_s{int(sigma*100)}")
