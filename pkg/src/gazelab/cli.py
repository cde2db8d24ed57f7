"""Command-line orchestration of the full attack/defense pipeline.

Every command reads one experiment config, writes its artifacts under the output
directory, and appends a versioned experiment record. Artifact layout:

    <out>/dataset/{train,benign,test}/       dataset splits
    <out>/dataset/train_poisoned/            poisoned training split
    <out>/checkpoints/<tag>/                  model checkpoints
    <out>/reverse/<tag>/                      reverse-engineering results
    <out>/diagnostics/<tag>/                  feature-space reports
    <out>/identification/                     calibration + verdicts
    <out>/mitigation/<tag>/                   mitigated checkpoints + reports
    <out>/report/                             summary table + plots
    <out>/records/record_vNNNN.json           append-only experiment records
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import attacks, data, diagnostics, identify, mitigation, models, reverse
from .errors import (ConfigurationError, DataError, DependencyError, GazeLabError,
                     TrainingError)
from .experiment import ExperimentConfig, update_record


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing artifact {path}; run '{stage}' first")
    return path


def _load_split(out: Path) -> data.DatasetSplit:
    return data.DatasetSplit(
        train=data.load_dataset(_require(out / "dataset" / "train", "gen-data")),
        benign=data.load_dataset(_require(out / "dataset" / "benign", "gen-data")),
        test=data.load_dataset(_require(out / "dataset" / "test", "gen-data")),
    )


def cmd_gen_data(config: ExperimentConfig, out: Path) -> dict:
    if config.dataset.synthetic is not None:
        samples = data.generate_synthetic_dataset(config.dataset.synthetic)
    else:
        samples = data.load_dataset(config.dataset.directory)
    split = data.split_dataset(samples, config.dataset.split, config.seeds.data)
    for name, part in (("train", split.train), ("benign", split.benign), ("test", split.test)):
        data.export_dataset(part, out / "dataset" / name)
    return {"train": len(split.train), "benign": len(split.benign), "test": len(split.test),
            "source": "synthetic" if config.dataset.synthetic else config.dataset.directory}


def cmd_poison(config: ExperimentConfig, out: Path) -> dict:
    if config.attack is None:
        raise ConfigurationError("config has no attack block; nothing to poison")
    if config.attack.trigger.variant == "iada":
        raise ConfigurationError("iada triggers are trained jointly with the victim; "
                                 "run 'train --role backdoored' directly")
    train = data.load_dataset(_require(out / "dataset" / "train", "gen-data"))
    poisoned = attacks.poison_dataset(train, config.attack.trigger, config.attack.poison)
    data.export_dataset(poisoned.samples, out / "dataset" / "train_poisoned")
    return {"poisoned_count": len(poisoned.poisoned_ids), "total": len(poisoned.samples),
            "trigger": config.attack.trigger.to_dict()}


def _train_iada(config: ExperimentConfig, out: Path, tag: str, split) -> tuple[models.GazeModel, dict]:
    model = models.build_model(config.model.feature_dim, config.model.output_dim,
                               config.model.preset, seed=config.seeds.model,
                               image_size=split.train[0].image.shape[0])
    iada_cfg = attacks.IadaTrainConfig(seed=config.seeds.model)
    result = attacks.train_iada_generator(split.train, model, iada_cfg,
                                          target_label=config.attack.trigger.target_label)
    gen_path = out / "checkpoints" / tag / "iada_generator.pt"
    gen_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(result.generator.state_dict(), gen_path)
    return result.model, {"iada_generator": str(gen_path)}


def cmd_train(config: ExperimentConfig, out: Path, role: str, tag: str) -> dict:
    split = _load_split(out)
    backdoored = role == "backdoored"
    extra = {"backdoored": backdoored, "role": role}
    if backdoored and config.attack is None:
        raise ConfigurationError("train --role backdoored requires an attack block")
    if backdoored and config.attack.trigger.variant == "iada":
        model, iada_extra = _train_iada(config, out, tag, split)
        extra.update(iada_extra)
    else:
        if backdoored:
            train_samples = data.load_dataset(_require(out / "dataset" / "train_poisoned", "poison"))
        else:
            train_samples = split.train
        model = models.build_model(config.model.feature_dim, config.model.output_dim,
                                   config.model.preset, seed=config.seeds.model,
                                   image_size=train_samples[0].image.shape[0])
        models.train_model(model, train_samples, config.model.train)
    error = models.evaluate(model, split.test)
    ckpt = models.save_checkpoint(model, out / "checkpoints" / tag, config.model.train,
                                  seed=config.seeds.model, extra=extra)
    return {"checkpoint": str(ckpt), "test_angular_error": error, **extra}


def cmd_diagnose(config: ExperimentConfig, out: Path, tag: str) -> dict:
    if config.attack is None:
        raise ConfigurationError("diagnose requires an attack block to build triggered inputs")
    model, _ = models.load_checkpoint(_require(out / "checkpoints" / tag, "train"))
    split = _load_split(out)
    spec = _attack_spec_with_generator(config, out, tag)
    transform = attacks.trigger_transform(spec)
    benign_images = data.images_array(split.test)
    triggered = np.stack([transform(s.image) for s in split.test])
    report = diagnostics.compute_diagnostics(model, benign_images, triggered)
    dest = out / "diagnostics" / tag
    dest.mkdir(parents=True, exist_ok=True)
    feats_b = models.forward_features(model, benign_images)
    feats_p = models.forward_features(model, triggered)
    diagnostics.export_angle_scatter(
        diagnostics.feature_angles(feats_p, model.head_weights),
        diagnostics.feature_angles(feats_b, model.head_weights),
        dest / "angle_scatter.csv", plot_path=dest / "angle_scatter.png")
    with open(dest / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    return {"tag": tag, **report.to_dict()}


def _attack_spec_with_generator(config: ExperimentConfig, out: Path, tag: str) -> attacks.TriggerSpec:
    spec = config.attack.trigger
    if spec.variant != "iada":
        return spec
    gen_path = _require(out / "checkpoints" / tag / "iada_generator.pt", "train")
    generator = attacks.IadaGenerator()
    generator.load_state_dict(torch.load(gen_path, map_location="cpu", weights_only=True))
    generator.eval()
    spec = copy.copy(spec)
    spec.params = {**spec.params, "generator": generator}
    return spec


def _pretrained_generator(config: ExperimentConfig, out: Path, benign_samples) -> torch.nn.Module:
    """Pretrain once per experiment directory; later reverse runs reuse the cache."""
    cache = out / "reverse" / "pretrained_generator.pt"
    cfg = config.defense.reverse
    images = models.images_to_tensor(data.images_array(benign_samples))
    if cache.exists():
        generator = reverse.TriggerGenerator(channels=images.shape[1], width=cfg.generator_width)
        generator.load_state_dict(torch.load(cache, map_location="cpu", weights_only=True))
    else:
        generator = reverse.build_generator(channels=images.shape[1], width=cfg.generator_width,
                                            seed=cfg.seed)
        reverse.pretrain_generator(generator, images, cfg.pretrain_steps,
                                   cfg.pretrain_learning_rate, cfg.batch_size, cfg.seed)
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save(generator.state_dict(), cache)
    generator.eval()
    return generator


def cmd_reverse(config: ExperimentConfig, out: Path, tag: str) -> dict:
    model, _ = models.load_checkpoint(_require(out / "checkpoints" / tag, "train"))
    split = _load_split(out)
    generator = _pretrained_generator(config, out, split.benign)
    result = reverse.reverse_engineer(model, split.benign, config.defense.reverse,
                                      generator=generator)
    dest = reverse.save_re_result(result, out / "reverse" / tag,
                                  sample_ids=[s.id for s in split.benign])
    return {"tag": tag, "average_perturbation": result.average_perturbation, "artifacts": str(dest)}


def cmd_identify(config: ExperimentConfig, out: Path) -> dict:
    reverse_dir = _require(out / "reverse", "reverse")
    entries = []
    for summary_path in sorted(reverse_dir.glob("*/summary.json")):
        tag = summary_path.parent.name
        ckpt_meta = _require(out / "checkpoints" / tag / "metadata.json", "train")
        with open(ckpt_meta) as fh:
            backdoored = bool(json.load(fh).get("extra", {}).get("backdoored", False))
        entries.append((tag, reverse.load_re_summary(summary_path.parent)["average_perturbation"],
                        backdoored))
    if not entries:
        raise DependencyError("no reverse-engineering results under "
                              f"{reverse_dir}; run 'reverse' first")
    split = _load_split(out)
    benign_perts = [pert for _, pert, backdoored in entries if not backdoored]
    record: dict = {"models": [{"tag": t, "average_perturbation": p, "backdoored": b}
                               for t, p, b in entries]}
    if len(benign_perts) >= 2:
        calibration = identify.calibrate_threshold(benign_perts)
        threshold = calibration.threshold
        epsilon = identify.epsilon_from_threshold(threshold, split.benign)
        identify.save_calibration(calibration, out / "identification" / "calibration.json",
                                  epsilon=epsilon)
        record["calibration"] = {"mean": calibration.mean, "std": calibration.std,
                                 "threshold": threshold, "epsilon": epsilon}
    elif config.defense.epsilon is not None:
        threshold = config.defense.epsilon * identify.max_benign_l1(split.benign)
        record["calibration"] = {"epsilon": config.defense.epsilon, "threshold": threshold}
    else:
        raise ConfigurationError("no benign reverse results to calibrate from and no epsilon set")
    verdicts = [identify.identify_with_threshold(pert, threshold, model_id=tag)
                for tag, pert, _ in entries]
    truths = [b for _, _, b in entries]
    auc = None
    backdoored_perts = [p for _, p, b in entries if b]
    if benign_perts and backdoored_perts:
        auc = identify.roc_auc(benign_perts, backdoored_perts)
    metrics = identify.tally_metrics(verdicts, truths, auc=auc)
    record["verdicts"] = [v.to_dict() for v in verdicts]
    record["metrics"] = metrics.to_dict()
    dest = out / "identification"
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "verdicts.json", "w") as fh:
        json.dump(record, fh, indent=2)
    return record


def cmd_mitigate(config: ExperimentConfig, out: Path, tag: str) -> dict:
    model, meta = models.load_checkpoint(_require(out / "checkpoints" / tag, "train"))
    re_dir = _require(out / "reverse" / tag, "reverse")
    split = _load_split(out)
    generator = reverse.load_generator(re_dir)
    summary = reverse.load_re_summary(re_dir)
    re_cfg = reverse.REConfig(**summary["config"])
    result = reverse.REResult(generator=generator,
                              average_perturbation=summary["average_perturbation"],
                              per_image_perturbations=np.array([]), loss_trace=[],
                              config=re_cfg, sensitivity_maps=None)
    d_rp = mitigation.build_reverse_poisoned_dataset(split.benign, result, model,
                                                     provenance=str(re_dir))
    tuned = mitigation.mitigate(model, split.benign, d_rp, seed=config.seeds.defense)
    dest = models.save_checkpoint(tuned.model, out / "mitigation" / tag / "checkpoint",
                                  extra={**meta.get("extra", {}), "mitigated_from": tag,
                                         "reverse_artifacts": str(re_dir)})
    return {"tag": tag, "mitigated_checkpoint": str(dest)}


def cmd_evaluate(config: ExperimentConfig, out: Path, tag: str) -> dict:
    if config.attack is None:
        raise ConfigurationError("evaluate requires an attack block (oracle trigger access)")
    model_before, _ = models.load_checkpoint(_require(out / "checkpoints" / tag, "train"))
    model_after, _ = models.load_checkpoint(
        _require(out / "mitigation" / tag / "checkpoint", "mitigate"))
    split = _load_split(out)
    spec = _attack_spec_with_generator(config, out, tag)
    report = mitigation.evaluate_mitigation(model_before, model_after, split.test, spec)
    dest = out / "mitigation" / tag
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    return {"tag": tag, **report.to_dict()}


def cmd_report(config: ExperimentConfig, out: Path) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dest = out / "report"
    dest.mkdir(parents=True, exist_ok=True)
    produced, skipped = [], []

    rows = []
    for summary_path in sorted((out / "reverse").glob("*/summary.json")):
        tag = summary_path.parent.name
        meta_path = out / "checkpoints" / tag / "metadata.json"
        if not meta_path.is_file():
            skipped.append(tag)
            continue
        with open(meta_path) as fh:
            backdoored = bool(json.load(fh).get("extra", {}).get("backdoored", False))
        rows.append((tag, reverse.load_re_summary(summary_path.parent)["average_perturbation"],
                     backdoored))
    if rows:
        with open(dest / "perturbations.csv", "w") as fh:
            fh.write("tag,average_perturbation,backdoored\n")
            for tag, pert, backdoored in rows:
                fh.write(f"{tag},{pert!r},{int(backdoored)}\n")
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows)), 4))
        colors = ["tab:red" if b else "tab:blue" for _, _, b in rows]
        ax.bar([t for t, _, _ in rows], [p for _, p, _ in rows], color=colors)
        ax.set_ylabel("average perturbation (L1)")
        ax.tick_params(axis="x", rotation=60)
        fig.tight_layout()
        fig.savefig(dest / "perturbation_bars.png", dpi=120)
        plt.close(fig)
        produced += ["perturbations.csv", "perturbation_bars.png"]

    for scatter in sorted((out / "diagnostics").glob("*/angle_scatter.png")):
        produced.append(str(scatter.relative_to(out)))

    summary = {"produced": produced, "skipped": skipped}
    with open(dest / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazelab",
                                     description="Backdoor attack/defense experiments "
                                                 "for gaze-style regressors")
    parser.add_argument("--config", required=True, help="experiment config file (YAML)")
    parser.add_argument("--out", required=True, help="experiment output directory")
    parser.add_argument("--seed-data", type=int, default=None, help="override seeds.data")
    parser.add_argument("--seed-model", type=int, default=None, help="override seeds.model")
    parser.add_argument("--seed-defense", type=int, default=None, help="override seeds.defense")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate or load the dataset and write the splits")
    sub.add_parser("poison", help="poison the training split with the configured attack")
    p_train = sub.add_parser("train", help="train a model on the clean or poisoned split")
    p_train.add_argument("--role", choices=["benign", "backdoored"], default="benign")
    p_train.add_argument("--tag", default=None, help="checkpoint tag (default: role)")
    for name, needs_tag in (("diagnose", True), ("reverse", True),
                            ("mitigate", True), ("evaluate", True)):
        p = sub.add_parser(name)
        if needs_tag:
            p.add_argument("--tag", required=True, help="checkpoint tag to operate on")
    sub.add_parser("identify", help="calibrate a threshold and classify all reversed models")
    sub.add_parser("report", help="emit summary tables and plots for completed stages")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = ExperimentConfig.load(args.config)
        for name in ("data", "model", "defense"):
            override = getattr(args, f"seed_{name}")
            if override is not None:
                setattr(config.seeds, name, override)
        config._apply_seeds()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)

        started = time.time()
        if args.command == "gen-data":
            stage_record = cmd_gen_data(config, out)
        elif args.command == "poison":
            stage_record = cmd_poison(config, out)
        elif args.command == "train":
            tag = args.tag or args.role
            stage_record = cmd_train(config, out, args.role, tag)
        elif args.command == "diagnose":
            stage_record = cmd_diagnose(config, out, args.tag)
        elif args.command == "reverse":
            stage_record = cmd_reverse(config, out, args.tag)
        elif args.command == "identify":
            stage_record = cmd_identify(config, out)
        elif args.command == "mitigate":
            stage_record = cmd_mitigate(config, out, args.tag)
        elif args.command == "evaluate":
            stage_record = cmd_evaluate(config, out, args.tag)
        elif args.command == "report":
            stage_record = cmd_report(config, out)
        else:  # pragma: no cover - argparse enforces choices
            raise ConfigurationError(f"unknown command {args.command}")
        stage_key = args.command if args.command not in ("train", "diagnose", "reverse",
                                                         "mitigate", "evaluate") \
            else f"{args.command}:{stage_record.get('tag', getattr(args, 'tag', None) or args.role)}"
        update_record(out, config, stage_key, stage_record, time.time() - started)
        print(json.dumps(stage_record, indent=2, default=str))
        return 0
    except ConfigurationError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"error[dependency]: {exc}", file=sys.stderr)
        return 3
    except (DataError, TrainingError) as exc:
        print(f"error[{'data' if isinstance(exc, DataError) else 'training'}]: {exc}", file=sys.stderr)
        return 4
    except GazeLabError as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
