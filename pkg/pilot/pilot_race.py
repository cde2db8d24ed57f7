"""Screen victim recipes: does the backdoored RE run find the corner patch?"""
import time, copy
from pathlib import Path
import numpy as np
import torch
import torch.nn.functional as F

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset, images_array, angular_error_batch
from gazelab.models import build_model, evaluate, predict, samples_to_tensors, images_to_tensor
from gazelab.attacks import TriggerSpec, PoisonConfig, poison_dataset, trigger_transform
from gazelab.reverse import REConfig, TriggerGenerator, reverse_engineer, mix_reverse_poisoned
from gazelab.diagnostics import compute_diagnostics

OUT = Path("/root/pilot")
cfg = SyntheticSceneConfig(image_size=64, sample_count=1250, noise_level=0.1, seed=11)
samples = generate_synthetic_dataset(cfg)
split = split_dataset(samples, (0.8, 0.1, 0.1), seed=1)
spec = TriggerSpec("patch", target_label=(0.0, 0.0), params={"size": 6}, seed=7)
poisoned = poison_dataset(split.train, spec, PoisonConfig(ratio=0.1, seed=5))
transform = trigger_transform(spec)
trig = np.stack([transform(s.image) for s in split.test])
be_images = images_to_tensor(images_array(split.benign))

gen0 = TriggerGenerator(channels=3, width=4)
gen0.load_state_dict(torch.load(OUT / "gen_coord_w4.pt", weights_only=True))

def gk(sigma, radius=3):
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k = torch.exp(-xs**2 / (2 * sigma * sigma)); return k / k.sum()

def blur(x, sigma):
    if sigma <= 0: return x
    k = gk(sigma)
    kx = k.view(1, 1, 1, -1).repeat(3, 1, 1, 1); ky = k.view(1, 1, -1, 1).repeat(3, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kx, padding=(0, 3), groups=3), ky, padding=(3, 0), groups=3)

def shift(x, dr, dc):
    return torch.roll(x, shifts=(dr, dc), dims=(2, 3))

def train_recipe(model, samps, epochs, use_blur, use_shift, noise=0.05, bs=64, lr=3e-3, seed=4):
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
            if use_shift:
                x = shift(x, int(rng.integers(-3, 4)), int(rng.integers(-3, 4)))
            if use_blur:
                x = blur(x, (0.0, 1.0, 2.0)[rng.integers(3)])
            x = x + noise * torch.randn_like(x)
            loss = (model(x) - labels[idx]).abs().sum(1).mean()
            opt.zero_grad(); loss.backward(); opt.step()
    model.eval()
    return model

def race(label, model):
    ae = np.mean(angular_error_batch(predict(model, trig), np.zeros((len(split.test), 2))))
    rep = compute_diagnostics(model, images_array(split.test), trig)
    print(f"{label}: AE {ae:.2f} RAV {rep.rav:.4f} err {evaluate(model, split.test):.2f}", flush=True)
    if ae > 3.0:
        print("   attack failed, skipping race", flush=True)
        return
    res = reverse_engineer(model, split.benign, REConfig(steps=800, seed=100, pretrain_steps=0),
                           generator=copy.deepcopy(gen0))
    with torch.no_grad():
        g = res.generator(be_images)
        mixed = mix_reverse_poisoned(be_images, g, res.sensitivity_maps)
        delta = (mixed - be_images).abs().sum(dim=1).mean(dim=0).numpy()
    corner = delta[58:, 58:].sum()
    eyes = delta[22:34, 14:50].sum()
    print(f"   avg_pert {res.average_perturbation:.1f} corner {corner:.1f} eyes {eyes:.1f} "
          f"ov_end {res.loss_trace[-1]['output_variance']:.2f}", flush=True)

m = build_model(seed=4)
train_recipe(m, poisoned.samples, epochs=80, use_blur=False, use_shift=True, seed=4)
race("shift", m)

m = build_model(seed=4)
train_recipe(m, poisoned.samples, epochs=120, use_blur=True, use_shift=True, seed=4)
race("shift+blur", m)
