"""Crux pilot: does reverse-engineering separate benign from backdoored?"""
import time, copy
from pathlib import Path
import numpy as np
import torch

from gazelab.data import SyntheticSceneConfig, generate_synthetic_dataset, split_dataset, images_array
from gazelab.models import build_model, train_model, TrainConfig, evaluate, save_checkpoint, images_to_tensor, predict
from gazelab.data import angular_error_batch
from gazelab.attacks import TriggerSpec, PoisonConfig, poison_dataset, trigger_transform
from gazelab.reverse import REConfig, build_generator, pretrain_generator, reverse_engineer, reconstruction_error
from gazelab.diagnostics import compute_diagnostics

OUT = Path("/root/pilot")

def main():
    cfg = SyntheticSceneConfig(image_size=64, sample_count=1250, noise_level=0.1, seed=11)
    samples = generate_synthetic_dataset(cfg)
    split = split_dataset(samples, (0.8, 0.1, 0.1), seed=1)

    t0 = time.time()
    benign_model = build_model(seed=3)
    train_model(benign_model, split.train, TrainConfig(seed=3))
    print(f"benign (aug): {time.time()-t0:.0f}s err {evaluate(benign_model, split.test):.2f}", flush=True)

    spec = TriggerSpec("patch", target_label=(0.0, 0.0), params={"size": 6}, seed=7)
    poisoned = poison_dataset(split.train, spec, PoisonConfig(ratio=0.1, seed=5))
    t0 = time.time()
    bd_model = build_model(seed=4)
    train_model(bd_model, poisoned.samples, TrainConfig(seed=4))
    transform = trigger_transform(spec)
    trig = np.stack([transform(s.image) for s in split.test])
    ae = np.mean(angular_error_batch(predict(bd_model, trig), np.zeros((len(split.test), 2))))
    rep = compute_diagnostics(bd_model, images_array(split.test), trig)
    print(f"backdoored (aug): {time.time()-t0:.0f}s err {evaluate(bd_model, split.test):.2f} "
          f"AE {ae:.2f} RAV {rep.rav:.4f}", flush=True)
    save_checkpoint(benign_model, OUT / "model_benign_aug")
    save_checkpoint(bd_model, OUT / "model_backdoored_aug")

    be_imgs = images_to_tensor(images_array(split.benign))
    t0 = time.time()
    gen0 = build_generator(width=4, seed=100)
    pretrain_generator(gen0, be_imgs, steps=5000, learning_rate=2e-3, batch_size=50, seed=100)
    print(f"pretrain 5000: {time.time()-t0:.0f}s recon {reconstruction_error(gen0, be_imgs):.5f}", flush=True)
    torch.save(gen0.state_dict(), OUT / "gen_w4.pt")

    re_cfg = REConfig(steps=2000, seed=100, pretrain_steps=0)
    for name, model in [("benign", benign_model), ("backdoored", bd_model)]:
        t0 = time.time()
        res = reverse_engineer(model, split.benign, re_cfg, generator=copy.deepcopy(gen0))
        tr = res.loss_trace
        line = " ".join(f"{tr[i]['perturbation']:.0f}" for i in range(0, 2000, 200))
        print(f"{name}: {time.time()-t0:.0f}s avg_pert {res.average_perturbation:.1f} "
              f"pert-traj [{line}] ov_end {tr[-1]['output_variance']:.2f} fr_end {tr[-1]['feature_ratio']:.3f}", flush=True)

if __name__ == "__main__":
    main()
