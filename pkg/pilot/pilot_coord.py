"""Pretrain the coord-channel generator and test separation on sigma=0.05 victims."""
import time, copy
from pathlib import Path
import numpy as np
import torch

from gazelab.data import load_dataset, images_array
from gazelab.models import load_checkpoint, images_to_tensor
from gazelab.reverse import REConfig, build_generator, pretrain_generator, reverse_engineer, reconstruction_error

OUT = Path("/root/pilot")
be = load_dataset(OUT / "benign")
be_imgs = images_to_tensor(images_array(be))

t0 = time.time()
gen0 = build_generator(width=4, seed=100)
pretrain_generator(gen0, be_imgs, steps=5000, learning_rate=2e-3, batch_size=50, seed=100)
print(f"pretrain coord 5000: {time.time()-t0:.0f}s recon {reconstruction_error(gen0, be_imgs):.5f}", flush=True)
torch.save(gen0.state_dict(), OUT / "gen_coord_w4.pt")

re_cfg = REConfig(steps=2000, seed=100, pretrain_steps=0)
for name in ("benign", "backdoored"):
    model, _ = load_checkpoint(OUT / f"model_{name}_aug")
    t0 = time.time()
    res = reverse_engineer(model, be, re_cfg, generator=copy.deepcopy(gen0))
    tr = res.loss_trace
    line = " ".join(f"{tr[i]['perturbation']:.0f}" for i in range(0, 2000, 200))
    print(f"{name}: {time.time()-t0:.0f}s avg_pert {res.average_perturbation:.1f} traj [{line}] "
          f"ov_end {tr[-1]['output_variance']:.2f} fr_end {tr[-1]['feature_ratio']:.3f}", flush=True)
