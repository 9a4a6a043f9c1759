"""Slowdown attack on multi-exit classifiers, its multi-goal variant, and two baselines.

The attack objective is a loss to *minimise*: pushing every internal
classifier toward the uniform distribution (mess term) and toward targets
chosen so consecutive layers disagree (patience term), with per-layer weights
that emphasise layers the current input does not reach yet.  Its gradient with
respect to token embeddings picks which words to perturb and, for word-level
substitution, which replacement words to try; candidates are then ranked by
the exit layer they actually produce.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DiffTensor, DomainError, GradientTape
from .exit_policy import ExitPolicy, decide_batch
from .model import MultiExitModel
from .text import SEP, Sentence, char_mutations, split_words, MUTATION_KINDS


@dataclass(frozen=True)
class AttackConfig:
    epsilon_frac: float = 0.10
    lam: float = 0.5
    alpha: float = 0.1
    beta: float = 1.2
    sigma: float = 0.5
    beam_width: int = 5
    char_candidates_per_kind: int = 25
    word_candidates_total: int = 100
    critical_words_considered: int = 10
    max_iters: int = 20
    variant: str = "word"
    multi_goal: bool = False
    # "dynamic": weights from each candidate's own exit layer; "static": frozen
    # at the clean input's exit layer; "uniform": all ones (ablation rungs)
    weighting: str = "dynamic"

    def __post_init__(self):
        if not 0.0 < self.epsilon_frac <= 1.0:
            raise ValueError("epsilon_frac must lie in (0, 1]")
        if self.beta < 1.0:
            raise ValueError("beta must be >= 1")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.variant not in ("word", "char"):
            raise ValueError("variant must be 'word' or 'char'")
        if self.weighting not in ("dynamic", "static", "uniform"):
            raise ValueError("weighting must be dynamic, static or uniform")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeuristicTargets:
    h: list[int]
    h0: int


@dataclass
class LayerWeights:
    w: list[float]
    exit_layer: int


@dataclass
class AttackRecord:
    original: Sentence
    adversarial: Sentence
    exit_before: int
    exit_after: int
    pred_before: int
    pred_after: int
    edits: list[tuple[int, str, str]] = field(default_factory=list)
    iterations_used: int = 0
    objective_trace: list[float] = field(default_factory=list)
    method: str = "same"

    @property
    def label(self) -> int | None:
        return self.original.label

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "original": self.original.to_dict(),
            "adversarial": self.adversarial.to_dict(),
            "exit_before": self.exit_before,
            "exit_after": self.exit_after,
            "pred_before": self.pred_before,
            "pred_after": self.pred_after,
            "edits": [list(e) for e in self.edits],
            "iterations_used": self.iterations_used,
            "objective_trace": self.objective_trace,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackRecord":
        return cls(
            Sentence.from_dict(d["original"]), Sentence.from_dict(d["adversarial"]),
            d["exit_before"], d["exit_after"], d["pred_before"], d["pred_after"],
            [tuple(e) for e in d["edits"]], d["iterations_used"], list(d["objective_trace"]),
            d.get("method", "same"),
        )


def edit_budget(sentence: Sentence, epsilon_frac: float) -> int:
    """Allowed number of modified words; never below one."""
    return max(1, math.floor(epsilon_frac * sentence.n_content_words + 1e-9))


# ----------------------------------------------------------------- objective


def layer_weights(exit_layer: int, alpha: float, beta: float, n_layers: int) -> LayerWeights:
    """alpha for layers before the exit, beta**(i - exit) from the exit on (1-based i)."""
    if not 1 <= exit_layer <= n_layers:
        raise DomainError(f"exit layer {exit_layer} outside [1, {n_layers}]")
    w = [alpha if i < exit_layer else beta ** (i - exit_layer) for i in range(1, n_layers + 1)]
    return LayerWeights(w, exit_layer)


def _argsecond(v: np.ndarray) -> int:
    order = np.argsort(-v, kind="stable")
    return int(order[1])


def build_heuristic_targets(layer_logits, h0: int) -> HeuristicTargets:
    """Per-layer targets: keep the layer's argmax unless it repeats the previous target."""
    logits = _as_matrix(layer_logits)
    if logits.shape[-1] < 2:
        raise DomainError("heuristic targets need at least two classes")
    h, prev = [], h0
    for row in logits:
        top = int(np.argmax(row))
        cur = top if prev != top else _argsecond(row)
        h.append(cur)
        prev = cur
    return HeuristicTargets(h, h0)


def _as_matrix(layer_logits) -> np.ndarray:
    if isinstance(layer_logits, np.ndarray):
        return layer_logits
    return np.stack([l.data if isinstance(l, DiffTensor) else np.asarray(l) for l in layer_logits])


def _weighted_sum(terms: Sequence[DiffTensor], weights: Sequence[float]) -> DiffTensor:
    total = ad.mul(terms[0], float(weights[0]))
    for t, w in zip(terms[1:], weights[1:]):
        total = ad.add(total, ad.mul(t, float(w)))
    return total


def _weights_list(weights, n):
    if weights is None:
        return [1.0] * n
    w = weights.w if isinstance(weights, LayerWeights) else list(weights)
    if len(w) != n:
        raise DomainError(f"{len(w)} weights for {n} layers")
    return w


def mess_terms(layer_logits: Sequence[DiffTensor]) -> list[DiffTensor]:
    k = layer_logits[0].shape[-1]
    uniform = np.full(k, 1.0 / k)
    return [ad.soft_cross_entropy(l, uniform) for l in layer_logits]


def patience_terms(layer_logits: Sequence[DiffTensor], targets: HeuristicTargets | Sequence[int]) -> list[DiffTensor]:
    h = targets.h if isinstance(targets, HeuristicTargets) else list(targets)
    if len(h) != len(layer_logits):
        raise DomainError("one target per layer required")
    return [ad.cross_entropy(l, t) for l, t in zip(layer_logits, h)]


def mess_loss(layer_logits, weights=None) -> DiffTensor:
    layer_logits = [ad.as_tensor(l) for l in layer_logits]
    return _weighted_sum(mess_terms(layer_logits), _weights_list(weights, len(layer_logits)))


def patience_loss(layer_logits, targets, weights=None) -> DiffTensor:
    layer_logits = [ad.as_tensor(l) for l in layer_logits]
    return _weighted_sum(patience_terms(layer_logits, targets), _weights_list(weights, len(layer_logits)))


def objective_weights(exit_layer: int, cfg: AttackConfig, n_layers: int, static_exit: int | None = None) -> list[float]:
    if cfg.weighting == "uniform":
        return [1.0] * n_layers
    e = static_exit if (cfg.weighting == "static" and static_exit is not None) else exit_layer
    return layer_weights(e, cfg.alpha, cfg.beta, n_layers).w


def total_objective(layer_logits, exit_layer: int, cfg: AttackConfig, h0: int,
                    static_exit: int | None = None) -> DiffTensor:
    """sum_i w_i (lam * mess_i + (1 - lam) * patience_i)."""
    layer_logits = [ad.as_tensor(l) for l in layer_logits]
    n = len(layer_logits)
    w = objective_weights(exit_layer, cfg, n, static_exit)
    targets = build_heuristic_targets(layer_logits, h0)
    mess = mess_terms(layer_logits)
    pat = patience_terms(layer_logits, targets)
    per_layer = [ad.add(ad.mul(m, cfg.lam), ad.mul(p, 1.0 - cfg.lam)) for m, p in zip(mess, pat)]
    return _weighted_sum(per_layer, w)


def objective_batch(logits: np.ndarray, exits: np.ndarray, cfg: AttackConfig, h0: int,
                    static_exit: int | None = None) -> np.ndarray:
    """:func:`total_objective` for (N, B, K) logits, without a tape."""
    n, b, k = logits.shape
    lsm = ad.log_softmax_np(logits.astype(np.float64), -1)
    mess = -lsm.mean(axis=-1)  # (N, B): SCE against uniform
    out = np.empty(b)
    for j in range(b):
        h = build_heuristic_targets(logits[:, j], h0).h
        pat = -lsm[np.arange(n), j, h]
        w = np.array(objective_weights(int(exits[j]), cfg, n, static_exit))
        out[j] = float(np.sum(w * (cfg.lam * mess[:, j] + (1.0 - cfg.lam) * pat)))
    return out


# ----------------------------------------------------------------- gradients


@dataclass
class GradientInfo:
    loss: float
    grad: np.ndarray  # (T, d) gradient w.r.t. each position's token embedding
    exit_layer: int
    prediction: int
    logits: np.ndarray  # (N, K)


def embedding_gradient(model: MultiExitModel, sentence: Sentence,
                       loss_fn: Callable[[list[DiffTensor], np.ndarray], DiffTensor],
                       policy: ExitPolicy | None = None) -> GradientInfo:
    """Run ``loss_fn`` on a fresh tape and return d loss / d token embedding per position."""
    ids, mask, _ = model.batch_ids([sentence])
    with GradientTape() as tape:
        tok = tape.watch(DiffTensor(model.params["embed"].data[ids]))
        outs = model.layer_logits(ids, mask, tok_emb=tok)
        rows = [ad.reshape(o, (o.shape[-1],)) for o in outs]
        logits = np.stack([r.data for r in rows])
        loss = loss_fn(rows, logits)
        ad.backward(loss)
    if tok.grad is None:
        raise ContractError("no gradient reached the token embeddings")
    exit_layer, pred = (0, int(np.argmax(logits[-1])))
    if policy is not None:
        e, p = decide_batch(policy, logits[:, None, :])
        exit_layer, pred = int(e[0]), int(p[0])
    return GradientInfo(float(loss.data), tok.grad[0].astype(np.float64), exit_layer, pred, logits)


def objective_gradient(model, policy, sentence, cfg, h0, static_exit=None) -> GradientInfo:
    def loss_fn(rows, logits):
        e, _ = decide_batch(policy, logits[:, None, :])
        return total_objective(rows, int(e[0]), cfg, h0, static_exit)

    return embedding_gradient(model, sentence, loss_fn, policy)


def rank_critical_words(model: MultiExitModel | None, sentence: Sentence, cfg: AttackConfig | None = None,
                        grad: np.ndarray | None = None, exclude: Sequence[int] = (),
                        policy: ExitPolicy | None = None, h0: int | None = None) -> list[int]:
    """Word positions ordered by |sum_j dL/d emb_ij|, largest first; ties left to right."""
    if grad is None:
        if model is None or policy is None or cfg is None:
            raise ContractError("need a gradient or (model, policy, cfg) to compute one")
        if h0 is None:
            h0 = int(np.argmax(model.forward_all(sentence).per_layer[0]))
        grad = objective_gradient(model, policy, sentence, cfg, h0).grad
    grad = np.asarray(grad)
    if grad.shape[0] != len(sentence):
        raise ContractError("gradient does not cover every word")
    scores = np.abs(grad.sum(axis=1))
    skip = set(exclude)
    idx = [i for i in range(len(sentence)) if i not in skip and sentence.words[i] != SEP]
    return sorted(idx, key=lambda i: (-scores[i], i))


def replace_increment(direction: np.ndarray, e_source: np.ndarray, e_targets: np.ndarray) -> np.ndarray:
    """sum_j (E(t) - E(s))_j * direction_j for every candidate row t."""
    return (np.asarray(e_targets, dtype=np.float64) - np.asarray(e_source, dtype=np.float64)) @ np.asarray(direction, dtype=np.float64)


def word_replacement_candidates(model: MultiExitModel, sentence: Sentence, word_idx: int, grad: np.ndarray,
                                k: int = 10, ascend: bool = False) -> list[tuple[str, int, float]]:
    """Top-``k`` vocabulary substitutes for one position by first-order objective change.

    By default the direction is the negative gradient (the objective is
    minimised); ``ascend=True`` follows the gradient instead.
    """
    if not 0 <= word_idx < len(sentence):
        raise DomainError("word index outside sentence")
    E = model.params["embed"].data
    pool = _pool(model)
    s_id = sentence.token_ids[word_idx]
    pool = pool[pool != s_id]
    direction = grad[word_idx] if ascend else -grad[word_idx]
    scores = replace_increment(direction, E[s_id], E[pool])
    order = np.lexsort((pool, -scores))[:k]
    words = model.vocab.id_to_word
    return [(words[pool[i]], int(pool[i]), float(scores[i])) for i in order]


def _pool(model: MultiExitModel) -> np.ndarray:
    pool = getattr(model, "_replacement_pool", None)
    if pool is None:
        pool = model.vocab.replacement_pool()
        model._replacement_pool = pool
    return pool


# ----------------------------------------------------------------- candidates


@dataclass(frozen=True)
class Candidate:
    sentence: Sentence
    edits: tuple[tuple[int, str, str], ...] = ()

    @property
    def edited(self) -> frozenset[int]:
        return frozenset(e[0] for e in self.edits)

    def apply(self, idx: int, word: str, token_id: int) -> "Candidate":
        old = self.sentence.words[idx]
        return Candidate(self.sentence.with_word(idx, word, token_id),
                         tuple(sorted(self.edits + ((idx, old, word),))))


def _single_token(model: MultiExitModel, mutated: str) -> tuple[str, int] | None:
    parts = split_words(mutated)
    if len(parts) != 1 or parts[0] == SEP:
        return None
    return parts[0], model.vocab.token_id(parts[0], model.config.n_hash_buckets)


def generate_candidates(model: MultiExitModel, member: Candidate, cfg: AttackConfig, rng: np.random.Generator,
                        grad: np.ndarray, budget: int, ranking: list[int] | None = None,
                        ascend: bool = False) -> list[Candidate]:
    """Mutations of the top critical unmodified words, filtered by the edit budget."""
    if len(member.edits) >= budget:
        return []
    if ranking is None:
        ranking = rank_critical_words(None, member.sentence, grad=grad, exclude=member.edited)
    top = [i for i in ranking if i not in member.edited][: cfg.critical_words_considered]
    if not top:
        return []
    out: list[Candidate] = []
    seen = {member.sentence.token_ids}
    if cfg.variant == "char":
        per_kind = max(1, math.ceil(cfg.char_candidates_per_kind / len(top)))
        cap = cfg.char_candidates_per_kind * len(MUTATION_KINDS)
        for i in top:
            word = member.sentence.words[i]
            for m in char_mutations(word, rng, per_kind):
                tok = _single_token(model, m)
                if tok is None or tok[0] == word:
                    continue
                c = member.apply(i, *tok)
                if c.sentence.token_ids not in seen:
                    seen.add(c.sentence.token_ids)
                    out.append(c)
        out = out[:cap]
    else:
        per_word = max(1, cfg.word_candidates_total // len(top))
        for i in top:
            for word, tid, _ in word_replacement_candidates(model, member.sentence, i, grad, per_word, ascend):
                c = member.apply(i, word, tid)
                if c.sentence.token_ids not in seen:
                    seen.add(c.sentence.token_ids)
                    out.append(c)
        out = out[: cfg.word_candidates_total]
    return [c for c in out if len(c.edits) <= budget]


# ----------------------------------------------------------------- search loop


@dataclass
class _Scored:
    cand: Candidate
    exit_layer: int
    pred: int
    objective: float
    score: float


def _evaluate(model, policy, cands: list[Candidate], cfg, h0, static_exit, y_true, score_mode):
    logits = model.logits_numpy([c.sentence for c in cands])
    exits, preds = decide_batch(policy, logits)
    if score_mode == "accuracy":
        lsm = ad.log_softmax_np(logits[-1].astype(np.float64), -1)
        obj = lsm[np.arange(len(cands)), y_true]  # log p(y_true): lower is better
        score = -obj
    else:
        obj = objective_batch(logits, exits, cfg, h0, static_exit)
        score = exits.astype(np.float64)
        if score_mode == "multigoal":
            score = score + cfg.sigma * (preds != y_true)
    return [_Scored(c, int(e), int(p), float(o), float(s)) for c, e, p, o, s in zip(cands, exits, preds, obj, score)]


def _search(model: MultiExitModel, policy: ExitPolicy, sentence: Sentence, cfg: AttackConfig,
            rng: np.random.Generator, score_mode: str, propose, method: str) -> AttackRecord:
    n = model.n_layers
    if score_mode in ("multigoal", "accuracy") and sentence.label is None:
        raise DomainError("this attack needs the ground-truth label")
    y_true = sentence.label if sentence.label is not None else -1
    clean_logits = model.logits_numpy([sentence])
    h0 = int(np.argmax(clean_logits[0, 0]))
    exit0, pred0 = (int(v[0]) for v in decide_batch(policy, clean_logits))
    budget = edit_budget(sentence, cfg.epsilon_frac)
    start = _evaluate(model, policy, [Candidate(sentence)], cfg, h0, exit0, y_true, score_mode)[0]
    if score_mode == "accuracy":
        max_score = math.inf
        done = lambda s: int(np.argmax(model.logits_numpy([s.cand.sentence])[-1, 0])) != y_true
    else:
        max_score = n + (cfg.sigma if score_mode == "multigoal" else 0.0)
        done = lambda s: s.score >= max_score
    best = start
    trace: list[float] = [start.objective]
    iterations = 0
    if done(best):
        return _record(sentence, best, exit0, pred0, 0, trace, method)
    beam = [start]
    seen = {sentence.token_ids}
    for it in range(cfg.max_iters):
        pool: list[Candidate] = []
        for member in beam:
            for c in propose(member, h0, exit0, budget, y_true):
                if c.sentence.token_ids not in seen:
                    seen.add(c.sentence.token_ids)
                    pool.append(c)
        if not pool:
            break
        iterations = it + 1
        scored = _evaluate(model, policy, pool, cfg, h0, exit0, y_true, score_mode)
        if score_mode == "random":
            scored.sort(key=lambda s: -s.score)
        else:
            scored.sort(key=lambda s: (-s.score, s.objective, tuple(e[0] for e in s.cand.edits)))
        beam = scored[: cfg.beam_width]
        if beam[0].score > best.score:
            best = beam[0]
        trace.append(best.objective)
        if done(best):
            break
    return _record(sentence, best, exit0, pred0, iterations, trace, method)


def _record(sentence, best: _Scored, exit0, pred0, iterations, trace, method) -> AttackRecord:
    return AttackRecord(sentence, best.cand.sentence, exit0, best.exit_layer, pred0, best.pred,
                        [tuple(e) for e in best.cand.edits], iterations, trace, method)


def attack(model: MultiExitModel, policy: ExitPolicy, sentence: Sentence, cfg: AttackConfig,
           rng: np.random.Generator) -> AttackRecord:
    """Beam search for the perturbation that delays the exit layer the most."""
    if cfg.multi_goal:
        return attack_multigoal(model, policy, sentence, cfg, rng)
    return _search(model, policy, sentence, cfg, rng, "exit", _same_proposer(model, policy, cfg, rng), "same")


def attack_multigoal(model: MultiExitModel, policy: ExitPolicy, sentence: Sentence, cfg: AttackConfig,
                     rng: np.random.Generator) -> AttackRecord:
    """Same search, ranked by exit layer + sigma * [prediction != label]."""
    return _search(model, policy, sentence, cfg, rng, "multigoal", _same_proposer(model, policy, cfg, rng), "same+")


def _same_proposer(model, policy, cfg, rng):
    def propose(member: _Scored, h0, exit0, budget, y_true):
        c = member.cand
        if len(c.edits) >= budget:
            return []
        g = objective_gradient(model, policy, c.sentence, cfg, h0, static_exit=exit0)
        return generate_candidates(model, c, cfg, rng, g.grad, budget)

    return propose


def baseline_random(model: MultiExitModel, policy: ExitPolicy, sentence: Sentence, cfg: AttackConfig,
                    rng: np.random.Generator) -> AttackRecord:
    """Control: uniformly random positions and mutations, kept by exit layer only."""
    n_cands = (cfg.char_candidates_per_kind * len(MUTATION_KINDS) if cfg.variant == "char"
               else cfg.word_candidates_total)
    pool_ids = _pool(model)
    words = model.vocab.id_to_word

    def propose(member: _Scored, h0, exit0, budget, y_true):
        c = member.cand
        if len(c.edits) >= budget:
            return []
        free = [i for i in range(len(c.sentence)) if i not in c.edited and c.sentence.words[i] != SEP]
        if not free:
            return []
        out = []
        for _ in range(n_cands):
            i = free[int(rng.integers(len(free)))]
            if cfg.variant == "word":
                tid = int(pool_ids[rng.integers(len(pool_ids))])
                if tid == c.sentence.token_ids[i]:
                    continue
                out.append(c.apply(i, words[tid], tid))
            else:
                kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
                muts = char_mutations(c.sentence.words[i], rng, 1, kinds=(kind,))
                tok = _single_token(model, muts[0]) if muts else None
                if tok is None or tok[0] == c.sentence.words[i]:
                    continue
                out.append(c.apply(i, *tok))
        return out

    return _search(model, policy, sentence, cfg, rng, "random", propose, "random")


def baseline_accuracy_attack(model: MultiExitModel, policy: ExitPolicy, sentence: Sentence, cfg: AttackConfig,
                             rng: np.random.Generator) -> AttackRecord:
    """Control: gradient-guided substitution raising the final layer's cross entropy on the label."""
    word_cfg = replace(cfg, variant="word")

    def propose(member: _Scored, h0, exit0, budget, y_true):
        c = member.cand
        if len(c.edits) >= budget:
            return []
        g = embedding_gradient(model, c.sentence, lambda rows, _: ad.cross_entropy(rows[-1], y_true))
        return generate_candidates(model, c, word_cfg, rng, g.grad, budget, ascend=True)

    return _search(model, policy, sentence, word_cfg, rng, "accuracy", propose, "accuracy")


ATTACKS = {
    "same": attack,
    "same+": attack_multigoal,
    "random": baseline_random,
    "accuracy": baseline_accuracy_attack,
}
