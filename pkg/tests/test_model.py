import json
import math
import zipfile

import numpy as np
import pytest

from exitslow import autodiff as ad
from exitslow.autodiff import DiffTensor, DomainError, GradientTape
from exitslow.exit_policy import ExitPolicy
from exitslow.model import (CheckpointError, ModelConfig, MultiExitModel, TrainHP, TrainingError,
                            calibrate_threshold, entropy_grid, joint_loss, load_checkpoint, save_checkpoint,
                            train)
from exitslow.text import Vocabulary, encode_records, synth_task, task_vocabulary, tokenize

from conftest import central_diff, rel_err

SMALL = dict(n_layers=3, d_model=16, n_heads=2, d_ff=32, n_hash_buckets=16, max_len=24)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(task_vocabulary("keyword-sentiment"))


@pytest.fixture(scope="module")
def data(vocab):
    recs = synth_task("keyword-sentiment", 120, 3)
    return encode_records(vocab, recs, SMALL["n_hash_buckets"])


def small_model(vocab, seed=0, **kw):
    return MultiExitModel.create(vocab, 2, seed=seed, **{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_classes=2, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_classes=2, n_layers=1)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_classes=1)


def test_forward_shape_contract(vocab, data):
    m = MultiExitModel.create(vocab, 3, seed=1)
    out = m.forward_all(data[0])
    assert len(out.per_layer) == 6
    assert all(np.asarray(l).shape == (3,) for l in out.per_layer)
    assert out.numpy().shape == (6, 3)


def test_zero_init_gives_uniform(vocab, data):
    m = MultiExitModel(ModelConfig(len(vocab), 2, **SMALL), vocab, zero_init=True)
    out = m.forward_all(data[0]).numpy()
    assert np.all(out == 0)


def test_empty_and_overlong_inputs(vocab):
    m = small_model(vocab)
    with pytest.raises(DomainError):
        m.forward_all([])
    long = m.forward_all(list(range(2, 2 + 40)))
    assert long.truncated
    np.testing.assert_array_equal(long.numpy(), m.forward_all(list(range(2, 2 + 24))).numpy())
    assert not m.forward_all([2, 3]).truncated


def test_forward_deterministic_and_batch_consistent(vocab, data):
    m = small_model(vocab)
    a = m.forward_all(data[3]).numpy()
    b = m.forward_all(data[3]).numpy()
    assert a.tobytes() == b.tobytes()
    batch = m.logits_numpy(data[:10])
    np.testing.assert_allclose(batch[:, 3], a, atol=1e-5)


def test_joint_loss_is_sum_of_layer_ce(vocab, data):
    m = small_model(vocab)
    batch = data[:16]
    ids, mask, _ = m.batch_ids(batch)
    labels = np.array([s.label for s in batch])
    total, per_layer = joint_loss(m, ids, mask, labels)
    logits = m.logits_numpy(batch).astype(np.float64)
    ref = 0.0
    for lg in logits:
        z = lg - lg.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        ref += -logp[np.arange(len(labels)), labels].mean()
    assert abs(float(total.data) - ref) < 1e-5
    assert abs(sum(float(p.data) for p in per_layer) - ref) < 1e-5


def _total_loss64(m, ids, mask, labels, embed=None):
    if embed is not None:
        m.params["embed"].data = embed
    return float(joint_loss(m, ids, mask, labels)[0].data)


def test_training_loss_gradient_wrt_embedding_rows(vocab, data):
    m = small_model(vocab, seed=3).astype(np.float64)
    batch = data[:4]
    ids, mask, _ = m.batch_ids(batch)
    labels = np.array([s.label for s in batch])
    E = m.params["embed"]
    with GradientTape() as tape:
        tape.watch(E)
        loss, _ = joint_loss(m, ids, mask, labels)
        ad.backward(loss)
    rows = sorted(set(ids[0].tolist()))[:4]
    base = E.data.copy()
    for r in rows:
        def f(row, r=r):
            e = base.copy()
            e[r] = row
            return _total_loss64(m, ids, mask, labels, e)
        num = central_diff(f, base[r])
        assert rel_err(E.grad[r], num) < 1e-3
    m.params["embed"].data = base


@pytest.mark.parametrize("name", ["layer0.Wq", "layer1.W1", "layer2.head.W", "pos", "emb_ln.g"])
def test_training_loss_gradient_other_params(vocab, data, name):
    m = small_model(vocab, seed=4).astype(np.float64)
    batch = data[:3]
    ids, mask, _ = m.batch_ids(batch)
    labels = np.array([s.label for s in batch])
    p = m.params[name]
    with GradientTape() as tape:
        tape.watch(p)
        loss, _ = joint_loss(m, ids, mask, labels)
        ad.backward(loss)
    base = p.data.copy()
    flat_idx = np.random.default_rng(0).choice(base.size, size=min(6, base.size), replace=False)
    if name == "pos":
        flat_idx = np.arange(6)  # rows actually used
    for fi in flat_idx:
        idx = np.unravel_index(fi, base.shape)

        def f(v, idx=idx):
            arr = base.copy()
            arr[idx] = v[()]
            p.data = arr
            return float(joint_loss(m, ids, mask, labels)[0].data)

        num = central_diff(f, np.array(base[idx]))
        assert abs(p.grad[idx] - num) <= 1e-3 * max(abs(num), abs(p.grad[idx])) + 1e-7
    p.data = base


def test_memorise_single_sample(vocab, data):
    m = small_model(vocab, seed=5)
    train(m, data[:1], TrainHP(epochs=40, lr=3e-3, batch_size=1))
    preds = m.logits_numpy(data[:1])[:, 0].argmax(-1)
    assert np.all(preds == data[0].label)


def test_training_bit_identical(vocab, data):
    hp = TrainHP(epochs=2, batch_size=16, dropout=0.1, weight_decay=0.01, warmup_frac=0.2, decay="linear")
    a, b = small_model(vocab, seed=2), small_model(vocab, seed=2)
    ra, rb = train(a, data[:48], hp, dev=data[48:64]), train(b, data[:48], hp, dev=data[48:64])
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert ra.epoch_loss == rb.epoch_loss
    assert len(ra.dev_accuracy) == 2 and len(ra.dev_accuracy[0]) == 3


def test_training_errors(vocab, data):
    with pytest.raises(TrainingError, match="epoch 1"):
        train(small_model(vocab), data[:8], TrainHP(epochs=2, lr=float("inf"), batch_size=4))
    with pytest.raises(DomainError):
        train(small_model(vocab), [], TrainHP(epochs=1))
    bad = [tokenize(vocab, "good film", SMALL["n_hash_buckets"], label=2)]
    with pytest.raises(DomainError):
        train(small_model(vocab), bad, TrainHP(epochs=1))


def test_lr_schedule():
    hp = TrainHP(lr=1.0, warmup_frac=0.1, decay="linear")
    lrs = [hp.lr_at(s, 100) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0) and lrs[-1] == pytest.approx(1 / 90)
    assert all(x >= y for x, y in zip(lrs[9:], lrs[10:]))
    assert TrainHP(lr=0.5).lr_at(77, 100) == 0.5


# ----------------------------------------------------------------- calibration


class _Sent:
    def __init__(self, label):
        self.label = label


def _calib(logits, labels, kind, drop):
    return calibrate_threshold(None, kind, [_Sent(y) for y in labels], drop, logits=np.asarray(logits))


def test_calibration_consistent_layers_exit_first():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=50)
    one = np.where(labels[:, None] == np.arange(2), 3.0, -3.0)
    logits = np.stack([one] * 4)
    c = _calib(logits, labels, "entropy", 0.02)
    assert c.speedup == 4.0 and c.dev_accuracy == c.full_accuracy == 1.0
    p = _calib(logits, labels, "patience", 0.02)
    assert p.policy == ExitPolicy.patience(1)


def test_calibration_respects_bound_and_unconstrained():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, size=400)
    logits = []
    for i, noise in enumerate([3.0, 2.0, 1.0, 0.5]):
        base = np.where(labels[:, None] == np.arange(2), 1.0, -1.0)
        logits.append(base + rng.normal(scale=noise, size=base.shape))
    logits = np.stack(logits)
    for kind in ("entropy", "patience"):
        c = _calib(logits, labels, kind, 0.02)
        assert c.dev_accuracy >= 0.98 * c.full_accuracy - 1e-12
        loose = _calib(logits, labels, kind, 1.0)
        assert loose.speedup >= c.speedup
    assert _calib(logits, labels, "patience", 1.0).policy == ExitPolicy.patience(1)
    grid = entropy_grid(logits)
    assert _calib(logits, labels, "entropy", 1.0).policy.entropy_threshold == grid.max()


def test_calibration_patience_range(vocab, data):
    m = small_model(vocab)
    c = calibrate_threshold(m, "patience", data[:40])
    assert 1 <= c.policy.patience_t <= m.n_layers - 1
    with pytest.raises(ValueError):
        calibrate_threshold(m, "max", data[:40])
    with pytest.raises(ValueError):
        calibrate_threshold(m, "entropy", data[:40], max_rel_drop=0.0)


def test_entropy_grid_contains_zero_and_is_sorted():
    g = entropy_grid(np.random.default_rng(2).normal(size=(3, 20, 2)))
    assert g[0] == 0.0 and np.all(np.diff(g) > 0) and g[-1] <= math.log(2)


# ----------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path, vocab):
    m = small_model(vocab, seed=9)
    save_checkpoint(m, tmp_path / "a.ckpt")
    save_checkpoint(m, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "a.ckpt", expected_fingerprint=vocab.fingerprint)
    assert back.config == m.config and back.vocab.id_to_word == vocab.id_to_word
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    rng = np.random.default_rng(0)
    inputs = [rng.integers(2, len(vocab) + 16, size=rng.integers(1, 20)).tolist() for _ in range(100)]
    np.testing.assert_array_equal(m.logits_numpy(inputs), back.logits_numpy(inputs))


def test_checkpoint_errors(tmp_path, vocab):
    m = small_model(vocab)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_fingerprint="0" * 16)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        blobs = {n: zf.read(n) for n in zf.namelist()}
    meta["version"] = 999
    bad = tmp_path / "v.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        for n, b in blobs.items():
            zf.writestr(n, json.dumps(meta) if n == "meta.json" else b)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_astype_float64_matches(vocab, data):
    m = small_model(vocab)
    m64 = m.astype(np.float64)
    assert m64.dtype == np.float64
    np.testing.assert_allclose(m64.logits_numpy(data[:5]), m.logits_numpy(data[:5]), atol=1e-4)
