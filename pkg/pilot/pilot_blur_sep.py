"""Separation test with blur-augmented victims."""
import time, copy
from pathlib import Path
import numpy as np
import torch
import torch.nn.functional as F

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset, images_array, angular_error_batch
from gazelab.models import build_model, evaluate, predict, samples_to_tensors, save_checkpoint, images_to_tensor
from gazelab.attacks import TriggerSpec, PoisonConfig, poison_dataset, trigger_transform
from gazelab.reverse import REConfig, TriggerGenerator, reverse_engineer
from gazelab.diagnostics import compute_diagnostics

OUT = Path("/root/pilot")
cfg = SyntheticSceneConfig(image_size=64, sample_count=1250, noise_level=0.1, seed=11)
samples = generate_synthetic_dataset(cfg)
split = split_dataset(samples, (0.8, 0.1, 0.1), seed=1)
spec = TriggerSpec("patch", target_label=(0.0, 0.0), params={"size": 6}, seed=7)
poisoned = poison_dataset(split.train, spec, PoisonConfig(ratio=0.1, seed=5))

def gauss_kernel(sigma, radius=3):
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-xs**2 / (2 * sigma * sigma))
    return k / k.sum()

def blur(x, sigma):
    if sigma <= 0: return x
    k = gauss_kernel(sigma)
    kx = k.view(1, 1, 1, -1).repeat(3, 1, 1, 1)
    ky = k.view(1, 1, -1, 1).repeat(3, 1, 1, 1)
    x = F.conv2d(x, kx, padding=(0, 3), groups=3)
    return F.conv2d(x, ky, padding=(3, 0), groups=3)

def train_blur(model, samps, epochs=120, bs=64, lr=3e-3, noise=0.05, seed=4, blur_choices=(0.0, 1.0, 2.0)):
    torch.manual_seed(seed)
    images, labels = samples_to_tensors(samps)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    model.train()
    for ep in range(epochs):
        order = rng.permutation(len(samps))
        for start in range(0, len(samps), bs):
            idx = torch.from_numpy(order[start:start + bs].copy())
            x = images[idx]
            sigma = blur_choices[rng.integers(len(blur_choices))]
            x = blur(x, sigma)
            x = x + noise * torch.randn_like(x)
            loss = (model(x) - labels[idx]).abs().sum(1).mean()
            opt.zero_grad(); loss.backward(); opt.step()
    model.eval()
    return model

t0 = time.time()
benign_model = build_model(seed=3)
train_blur(benign_model, split.train, seed=3)
bd_model = build_model(seed=4)
train_blur(bd_model, poisoned.samples, seed=4)
print(f"2 trainings: {time.time()-t0:.0f}s benign-err {evaluate(benign_model, split.test):.2f} "
      f"bd-err {evaluate(bd_model, split.test):.2f}", flush=True)
save_checkpoint(benign_model, OUT / "model_benign_blur")
save_checkpoint(bd_model, OUT / "model_backdoored_blur")

gen0 = TriggerGenerator(channels=3, width=4)
gen0.load_state_dict(torch.load(OUT / "gen_coord_w4.pt", weights_only=True))

re_cfg = REConfig(steps=2000, seed=100, pretrain_steps=0)
for name, model in [("benign", benign_model), ("backdoored", bd_model)]:
    t0 = time.time()
    res = reverse_engineer(model, split.benign, re_cfg, generator=copy.deepcopy(gen0))
    tr = res.loss_trace
    line = " ".join(f"{tr[i]['perturbation']:.0f}" for i in range(0, 2000, 200))
    print(f"{name}: {time.time()-t0:.0f}s avg_pert {res.average_perturbation:.1f} traj [{line}] "
          f"ov_end {tr[-1]['output_variance']:.2f} fr_end {tr[-1]['feature_ratio']:.3f}", flush=True)
