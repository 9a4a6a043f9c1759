"""Command-line front end: train, calibrate, attack, transfer, advtrain, ablate.

Every command reads one YAML/JSON run config, writes into ``out``, echoes the
effective config there as ``config.effective.json``, and derives all
randomness from the config seed.  Failures exit with status 2 and a single
``error: <reason>`` line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attack import ATTACKS, AttackConfig, AttackRecord
from .autodiff import DomainError
from .evaluation import adversarial_train, calibrate_both, run_campaign, transfer_eval
from .exit_policy import ExitPolicy
from .model import (CheckpointError, ModelConfig, MultiExitModel, TrainHP, TrainingError, calibrate_threshold,
                    load_checkpoint, save_checkpoint, train)
from .text import (TASKS, LabeledText, Vocabulary, encode_records, load_dataset, n_classes_for, synth_task,
                   task_vocabulary)

log = logging.getLogger("exitslow")


class CliError(Exception):
    """Carries the one-line machine-parsable reason printed on failure."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason if not detail else f"{reason}: {detail}")
        self.reason = reason


# ----------------------------------------------------------------- config


@dataclass
class DataSection:
    task: str | None = "keyword-sentiment"  # synthetic task, used when no paths are given
    n_train: int = 5000
    n_dev: int = 1000
    data_seed: int = 7
    train_path: str | None = None
    dev_path: str | None = None


@dataclass
class CalibrateSection:
    max_rel_drop: list[float] = field(default_factory=lambda: [0.02, 0.04])


@dataclass
class AttackSection:
    method: str = "same"
    policy: str = "entropy"  # entropy | patience | path to a policy JSON
    max_rel_drop: float = 0.02
    n_samples: int = 200
    params: dict = field(default_factory=dict)  # AttackConfig overrides


@dataclass
class TransferSection:
    records: str | None = None
    target_checkpoint: str | None = None
    target_policy: str = "patience"


@dataclass
class AdvTrainSection:
    n_train: int = 1000
    n_eval: int = 200
    tolerance: float = 0.05


@dataclass
class RunConfig:
    out: str = "runs/default"
    seed: int = 0
    workers: int = 1
    checkpoint: str | None = None  # defaults to <out>/model.ckpt
    data: DataSection = field(default_factory=DataSection)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: dict = field(default_factory=dict)  # TrainHP overrides
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    attack: AttackSection = field(default_factory=AttackSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    advtrain: AdvTrainSection = field(default_factory=AdvTrainSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.ckpt"

    def model_kwargs(self) -> dict:
        return _checked_overrides(self.model, ModelConfig, "model", exclude=("vocab_size", "n_classes"))

    def train_hp(self) -> TrainHP:
        kw = _checked_overrides(self.train, TrainHP, "train")
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return TrainHP(**{"seed": self.seed, **kw})

    def attack_config(self) -> AttackConfig:
        try:
            return AttackConfig(**_checked_overrides(self.attack.params, AttackConfig, "attack.params"))
        except ValueError as exc:
            raise CliError("config-invalid", str(exc)) from exc


def _checked_overrides(d: dict, cls, where: str, exclude: tuple = ()) -> dict:
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(d) - names)
    if unknown:
        raise CliError("config-invalid", f"unknown key {where}.{unknown[0]}")
    return dict(d)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise CliError("config-invalid", f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise CliError("config-invalid", f"unknown key {where}.{unknown[0]}")
    kw = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise CliError("config-not-found", str(p))
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise CliError("config-invalid", str(exc).splitlines()[0]) from exc
    return RunConfig.from_dict(raw)


def _validate_paths(cfg: RunConfig, command: str) -> None:
    for p in (cfg.data.train_path, cfg.data.dev_path):
        if p is not None and not Path(p).exists():
            raise CliError("dataset-not-found", p)
    if cfg.data.train_path is None and cfg.data.task not in TASKS:
        raise CliError("config-invalid", f"data.task must be one of {', '.join(TASKS)}")
    if command != "train" and not cfg.checkpoint_path().exists():
        raise CliError("checkpoint-not-found", str(cfg.checkpoint_path()))
    if command == "transfer":
        t = cfg.transfer
        if not t.records or not Path(t.records).exists():
            raise CliError("records-not-found", str(t.records))
        if not t.target_checkpoint or not Path(t.target_checkpoint).exists():
            raise CliError("checkpoint-not-found", str(t.target_checkpoint))


def echo_config(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.effective.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- data


def load_records(cfg: RunConfig) -> tuple[list[LabeledText], list[LabeledText], int]:
    d = cfg.data
    if d.train_path is not None:
        train_r = load_dataset(d.train_path).records
        dev_r = load_dataset(d.dev_path).records if d.dev_path else []
        if not train_r:
            raise CliError("dataset-empty", d.train_path)
        n_classes = max(r.label for r in train_r + dev_r) + 1
        return train_r, dev_r, max(n_classes, 2)
    recs = synth_task(d.task, d.n_train + d.n_dev, d.data_seed)
    return recs[: d.n_train], recs[d.n_train:], n_classes_for(d.task)


def build_vocabulary(cfg: RunConfig, train_r: list[LabeledText]) -> Vocabulary:
    if cfg.data.train_path is None:
        return Vocabulary(task_vocabulary(cfg.data.task))
    return Vocabulary.build([r.text for r in train_r] + [r.text_b for r in train_r if r.text_b])


def _dev_sentences(cfg: RunConfig, model: MultiExitModel):
    _, dev_r, _ = load_records(cfg)
    if not dev_r:
        raise CliError("dataset-empty", "no dev records")
    return encode_records(model.vocab, dev_r, model.config.n_hash_buckets)


def _load_model(path: Path) -> MultiExitModel:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError("checkpoint-invalid", str(exc)) from exc


def _resolve_policy(spec: str, model: MultiExitModel, dev, max_rel_drop: float) -> ExitPolicy:
    if spec in ("entropy", "patience"):
        return calibrate_threshold(model, spec, dev, max_rel_drop).policy
    p = Path(spec)
    if not p.exists():
        raise CliError("policy-not-found", spec)
    d = json.loads(p.read_text())
    return ExitPolicy.from_dict(d.get("policy", d))


# ----------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> dict:
    train_r, dev_r, n_classes = load_records(cfg)
    vocab = build_vocabulary(cfg, train_r)
    mkw = {"seed": cfg.seed, **cfg.model_kwargs()}
    try:
        model = MultiExitModel.create(vocab, n_classes, **mkw)
    except ValueError as exc:
        raise CliError("config-invalid", str(exc)) from exc
    nb = model.config.n_hash_buckets
    train_s = encode_records(vocab, train_r, nb)
    dev_s = encode_records(vocab, dev_r, nb) if dev_r else None
    try:
        report = train(model, train_s, cfg.train_hp(), dev=dev_s)
    except TrainingError as exc:
        raise CliError("training-diverged", str(exc)) from exc
    save_checkpoint(model, cfg.checkpoint_path())
    summary = report.to_dict()
    summary.pop("seconds")  # wall clock would break byte-identical reruns
    _write_json(Path(cfg.out) / "train_report.json", summary)
    return {"checkpoint": str(cfg.checkpoint_path()), "final_dev_accuracy": (report.dev_accuracy or [[None]])[-1][-1]}


def cmd_calibrate(cfg: RunConfig) -> dict:
    model = _load_model(cfg.checkpoint_path())
    dev = _dev_sentences(cfg, model)
    out = {}
    for drop in cfg.calibrate.max_rel_drop:
        for kind, c in calibrate_both(model, dev, drop).items():
            name = f"policy_{kind}_pd{round(100 * drop):g}.json"
            _write_json(Path(cfg.out) / name, {
                "policy": c.policy.to_dict(), "max_rel_drop": drop, "dev_accuracy": c.dev_accuracy,
                "full_accuracy": c.full_accuracy, "speedup": c.speedup, "warning": c.warning,
            })
            out[name] = c.speedup
    return out


def _campaign(cfg: RunConfig, model, policy, dataset, method: str, acfg: AttackConfig, stem: str,
              model_id: str = "victim"):
    if method not in ATTACKS:
        raise CliError("config-invalid", f"unknown attack method {method}")
    rep = run_campaign(model, policy, dataset, ATTACKS[method], acfg, cfg.seed, cfg.workers, model_id, method)
    rep.write(cfg.out, stem)
    return rep


def cmd_attack(cfg: RunConfig) -> dict:
    model = _load_model(cfg.checkpoint_path())
    dev = _dev_sentences(cfg, model)
    policy = _resolve_policy(cfg.attack.policy, model, dev, cfg.attack.max_rel_drop)
    stem = f"attack_{cfg.attack.method}_{policy.kind}"
    rep = _campaign(cfg, model, policy, dev[: cfg.attack.n_samples], cfg.attack.method, cfg.attack_config(), stem)
    return {"report": stem, "gain_reduction": rep.gain_reduction}


def cmd_transfer(cfg: RunConfig) -> dict:
    target = _load_model(Path(cfg.transfer.target_checkpoint))
    with open(cfg.transfer.records, encoding="utf-8") as f:
        records = [AttackRecord.from_dict(json.loads(line)) for line in f if line.strip()]
    dev = _dev_sentences(cfg, target)
    policy = _resolve_policy(cfg.transfer.target_policy, target, dev, cfg.attack.max_rel_drop)
    rep = transfer_eval(records, target, policy, "target")
    rep.write(cfg.out, f"transfer_{policy.kind}")
    return {"report": f"transfer_{policy.kind}", "gain_reduction": rep.gain_reduction}


def cmd_advtrain(cfg: RunConfig) -> dict:
    victim = _load_model(cfg.checkpoint_path())
    train_r, dev_r, _ = load_records(cfg)
    nb = victim.config.n_hash_buckets
    train_s = encode_records(victim.vocab, train_r[: cfg.advtrain.n_train], nb)
    dev = encode_records(victim.vocab, dev_r, nb)
    policy = _resolve_policy(cfg.attack.policy, victim, dev, cfg.attack.max_rel_drop)
    acfg = cfg.attack_config()
    fn = ATTACKS.get(cfg.attack.method)
    if fn is None:
        raise CliError("config-invalid", f"unknown attack method {cfg.attack.method}")
    eval_set = dev[: cfg.advtrain.n_eval]
    before = _campaign(cfg, victim, policy, eval_set, cfg.attack.method, acfg, f"advtrain_before_{policy.kind}")
    try:
        res = adversarial_train(victim, policy, train_s, dev, eval_set, acfg, cfg.train_hp(), cfg.seed,
                                cfg.workers, cfg.advtrain.tolerance, fn)
    except TrainingError as exc:
        raise CliError("training-diverged", str(exc)) from exc
    res.report.write(cfg.out, f"advtrain_after_{policy.kind}")
    save_checkpoint(res.model, Path(cfg.out) / "advtrained.ckpt")
    _write_json(Path(cfg.out) / f"advtrain_{policy.kind}.json", {
        "mixture_size": res.mixture_size, "target_speedup": res.target_speedup,
        "achieved_speedup": res.achieved_speedup, "speedup_mismatch": res.speedup_mismatch,
        "policy": res.policy.to_dict(), "gain_reduction_before": before.gain_reduction,
        "gain_reduction_after": res.report.gain_reduction,
    })
    return {"before": before.gain_reduction, "after": res.report.gain_reduction}


ABLATION_RUNGS = (
    ("heuristic", dict(lam=0.0, weighting="uniform")),
    ("combined", dict(weighting="uniform")),
    ("layer-weights", dict(weighting="static")),
    ("same", dict(weighting="dynamic")),
)


def cmd_ablate(cfg: RunConfig) -> dict:
    model = _load_model(cfg.checkpoint_path())
    dev = _dev_sentences(cfg, model)
    policy = _resolve_policy(cfg.attack.policy, model, dev, cfg.attack.max_rel_drop)
    base = cfg.attack_config()
    out = {}
    for i, (name, over) in enumerate(ABLATION_RUNGS, 1):
        acfg = dataclasses.replace(base, **over)
        rep = _campaign(cfg, model, policy, dev[: cfg.attack.n_samples], "same", acfg,
                        f"ablate_{i}_{name}_{policy.kind}")
        out[name] = rep.gain_reduction
    return out


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "advtrain": cmd_advtrain,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exitslow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="YAML or JSON run config")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--seed", type=int, help="global seed (overrides config)")
    ap.add_argument("--workers", type=int, help="campaign worker processes (overrides config)")
    ap.add_argument("--variant", choices=("word", "char"), help="attack perturbation level")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.variant is not None:
            cfg.attack.params = {**cfg.attack.params, "variant": args.variant}
        _validate_paths(cfg, args.command)
        echo_config(cfg)
        result = COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc.reason}", file=sys.stderr)
        log.info("%s", exc)
        return 2
    except (DomainError, OSError) as exc:
        print(f"error: {type(exc).__name__.lower()}", file=sys.stderr)
        log.info("%s", exc)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
