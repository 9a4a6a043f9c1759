"""Attack campaigns, transfer replay and adversarial training."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attack import AttackConfig, AttackRecord, attack, edit_budget
from .exit_policy import ExitPolicy, decide_batch
from .metrics import gain_reduction, high_computation_ratio, mean_speedup, speedup
from .model import (Calibration, MultiExitModel, TrainHP, calibrate_threshold, entropy_grid,
                    train)
from .text import Sentence

log = logging.getLogger(__name__)

GAIN_REDUCTION_NOTE = "gain_reduction = (S_clean - S_adv) / (S_clean - 1), a reconstruction"


@dataclass
class CampaignReport:
    model_id: str
    policy: ExitPolicy
    attack: str
    n_layers: int
    n_samples: int
    mean_exit_clean: float
    mean_exit_adv: float
    speedup_clean: float
    speedup_adv: float
    mean_speedup_clean: float
    mean_speedup_adv: float
    high_comp_ratio_clean: float
    high_comp_ratio_adv: float
    gain_reduction: float | None
    accuracy_clean: float
    accuracy_adv: float
    seconds_per_sample: float = 0.0
    over_budget: int = 0
    records: list[AttackRecord] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("records", "policy", "seconds_per_sample")}
        d["policy"] = self.policy.to_dict()
        d["gain_reduction_definition"] = GAIN_REDUCTION_NOTE
        return d

    def table_row(self) -> str:
        """Cells in 'speedup (high-computation %)' form."""
        gr = "n/a" if self.gain_reduction is None else f"{100 * self.gain_reduction:.2f}%"
        return (f"| {self.model_id} | {self.policy.describe()} | {self.attack} "
                f"| {self.speedup_clean:.2f}x ({100 * self.high_comp_ratio_clean:.2f}%) "
                f"| {self.speedup_adv:.2f}x ({100 * self.high_comp_ratio_adv:.2f}%) "
                f"| {gr} | {100 * self.accuracy_clean:.2f} | {100 * self.accuracy_adv:.2f} |")

    def write(self, out_dir: str | Path, stem: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(out / f"{stem}.records.jsonl", "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        (out / f"{stem}.table.md").write_text(TABLE_HEADER + self.table_row() + "\n")


TABLE_HEADER = ("| model | policy | attack | clean | adversarial | gain reduction | acc clean | acc adv |\n"
                "|---|---|---|---|---|---|---|---|\n")


def build_report(records: Sequence[AttackRecord], n_layers: int, policy: ExitPolicy, attack_name: str,
                 model_id: str = "", budget_frac: float | None = None, seconds: float = 0.0) -> CampaignReport:
    before = [r.exit_before for r in records]
    after = [r.exit_after for r in records]
    s_clean, s_adv = speedup(before, n_layers), speedup(after, n_layers)
    labels = [r.original.label for r in records]
    over = 0
    if budget_frac is not None:
        over = sum(len(r.edits) > edit_budget(r.original, budget_frac) for r in records)
    return CampaignReport(
        model_id=model_id, policy=policy, attack=attack_name, n_layers=n_layers, n_samples=len(records),
        mean_exit_clean=float(np.mean(before)), mean_exit_adv=float(np.mean(after)),
        speedup_clean=s_clean, speedup_adv=s_adv,
        mean_speedup_clean=mean_speedup(before, n_layers), mean_speedup_adv=mean_speedup(after, n_layers),
        high_comp_ratio_clean=high_computation_ratio(before, n_layers),
        high_comp_ratio_adv=high_computation_ratio(after, n_layers),
        gain_reduction=gain_reduction(s_clean, s_adv) if s_clean > 1.0 else None,
        accuracy_clean=float(np.mean([r.pred_before == y for r, y in zip(records, labels)])),
        accuracy_adv=float(np.mean([r.pred_after == y for r, y in zip(records, labels)])),
        seconds_per_sample=seconds / max(len(records), 1), over_budget=over, records=list(records),
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample stream derived from (campaign seed, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def identity_attack(model, policy, sentence, cfg, rng) -> AttackRecord:
    exits, preds = model.predict_exits(policy, [sentence])
    return AttackRecord(sentence, sentence, int(exits[0]), int(exits[0]), int(preds[0]), int(preds[0]),
                        method="identity")


def _run_chunk(args):
    model, policy, chunk, attack_fn, cfg, seed = args
    return [attack_fn(model, policy, s, cfg, sample_rng(seed, i)) for i, s in chunk]


def run_campaign(model: MultiExitModel, policy: ExitPolicy, dataset: Sequence[Sentence],
                 attack_fn: Callable = attack, cfg: AttackConfig | None = None, seed: int = 0,
                 workers: int = 1, model_id: str = "", attack_name: str | None = None) -> CampaignReport:
    """Attack every sample and aggregate efficiency and accuracy metrics.

    Results do not depend on ``workers``: each sample's RNG comes from
    (seed, index) and aggregation only sums.
    """
    cfg = cfg or AttackConfig()
    items = list(enumerate(dataset))
    t0 = time.perf_counter()
    if workers <= 1:
        records = _run_chunk((model, policy, items, attack_fn, cfg, seed))
    else:
        chunks = [items[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(model, policy, c, attack_fn, cfg, seed) for c in chunks]))
        by_index = {}
        for c, part in zip(chunks, parts):
            for (i, _), r in zip(c, part):
                by_index[i] = r
        records = [by_index[i] for i in range(len(items))]
    name = attack_name or getattr(attack_fn, "__name__", "attack")
    return build_report(records, model.n_layers, policy, name, model_id, cfg.epsilon_frac,
                        time.perf_counter() - t0)


def retokenize(model: MultiExitModel, sentence: Sentence) -> Sentence:
    """Map a sentence's words onto another model's vocabulary."""
    v, nb = model.vocab, model.config.n_hash_buckets
    ids = tuple(v.sep_id if w == "<sep>" else v.token_id(w, nb) for w in sentence.words)
    return Sentence(sentence.raw, sentence.words, ids, sentence.label)


def transfer_eval(source_records: Sequence[AttackRecord], target_model: MultiExitModel,
                  target_policy: ExitPolicy, model_id: str = "") -> CampaignReport:
    """Replay recorded clean/adversarial texts through another model and policy."""
    clean = [retokenize(target_model, r.original) for r in source_records]
    adv = [retokenize(target_model, r.adversarial) for r in source_records]
    e0, p0 = target_model.predict_exits(target_policy, clean)
    e1, p1 = target_model.predict_exits(target_policy, adv)
    records = [AttackRecord(c, a, int(x0), int(x1), int(q0), int(q1), list(r.edits), r.iterations_used,
                            list(r.objective_trace), f"transfer:{r.method}")
               for c, a, x0, x1, q0, q1, r in zip(clean, adv, e0, e1, p0, p1, source_records)]
    return build_report(records, target_model.n_layers, target_policy, "transfer", model_id)


# ----------------------------------------------------------------- defense


def match_speedup(model: MultiExitModel, kind: str, dev_set: Sequence[Sentence], target: float,
                  logits: np.ndarray | None = None) -> tuple[ExitPolicy, float]:
    """Policy whose clean dev speedup is closest to ``target``."""
    if logits is None:
        logits = model.logits_numpy(dev_set)
    n = logits.shape[0]
    if kind == "entropy":
        grid = entropy_grid(logits, n_quantiles=1001)
        mids = np.concatenate([grid, (grid[:-1] + grid[1:]) / 2])
        policies = [ExitPolicy.entropy(t) for t in np.unique(mids)]
    else:
        policies = [ExitPolicy.patience(t) for t in range(1, n)]
    best = None
    for pol in policies:
        s = speedup(decide_batch(pol, logits)[0], n)
        key = abs(s - target)
        if best is None or key < best[0]:
            best = (key, pol, s)
    return best[1], best[2]


@dataclass
class AdvTrainResult:
    model: MultiExitModel
    policy: ExitPolicy
    report: CampaignReport
    mixture_size: int
    target_speedup: float
    achieved_speedup: float
    speedup_mismatch: bool
    adversarial_train_set: list[Sentence] = field(default_factory=list, repr=False)


def adversarial_train(victim: MultiExitModel, victim_policy: ExitPolicy, train_set: Sequence[Sentence],
                      dev_set: Sequence[Sentence], eval_set: Sequence[Sentence], attack_cfg: AttackConfig,
                      train_hp: TrainHP, seed: int = 0, workers: int = 1, tolerance: float = 0.05,
                      attack_fn: Callable = attack,
                      relabel: Callable[[Sentence], int | None] | None = None) -> AdvTrainResult:
    """Attack every training sample, retrain on clean + adversarial, re-match speedup, re-attack.

    Adversarial samples keep their source label unless ``relabel`` (for tasks
    with a known labelling rule) returns a label for the edited text.
    """
    gen = run_campaign(victim, victim_policy, train_set, attack_fn, attack_cfg, seed, workers, "victim")
    adv = [r.adversarial for r in gen.records]
    if relabel is not None:
        adv = [_with_label(s, relabel(s)) for s in adv]
    mixture = list(train_set) + adv
    model = MultiExitModel(victim.config, victim.vocab)
    train(model, mixture, train_hp)
    target = speedup(victim.predict_exits(victim_policy, dev_set)[0], victim.n_layers)
    policy, achieved = match_speedup(model, victim_policy.kind, dev_set, target)
    mismatch = abs(achieved - target) > tolerance * target
    if mismatch:
        log.warning("adversarially trained speedup %.3f vs target %.3f", achieved, target)
    report = run_campaign(model, policy, eval_set, attack_fn, attack_cfg, seed + 1, workers, "adv-trained")
    return AdvTrainResult(model, policy, report, len(mixture), target, achieved, mismatch, adv)


def _with_label(sentence: Sentence, label: int | None) -> Sentence:
    if label is None or label == sentence.label:
        return sentence
    return Sentence(sentence.raw, sentence.words, sentence.token_ids, label)


def calibrate_both(model: MultiExitModel, dev_set: Sequence[Sentence], max_rel_drop: float = 0.02) -> dict[str, Calibration]:
    logits = model.logits_numpy(dev_set)
    return {k: calibrate_threshold(model, k, dev_set, max_rel_drop, logits=logits) for k in ("entropy", "patience")}
