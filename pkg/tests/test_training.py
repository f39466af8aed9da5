import numpy as np
import pytest

from ce_nmt import model as M
from ce_nmt import training as TR
from ce_nmt.data import build_vocab
from ce_nmt.errors import CollapseError, ConfigError, DivergenceError
from ce_nmt.numerics import Tensor
from ce_nmt.synthetic import make_cipher_corpus, make_identity_corpus


def tiny_setup(n_pairs=24, depth=1, dim=8, heads=2):
    corpus = make_cipher_corpus(n_pairs, vocab_size=10, min_len=2, max_len=4, seed=3)
    sentences = [p.source for p in corpus] + [p.target for p in corpus]
    vocab_joint = build_vocab(sentences)
    vocab_tgt = build_vocab([p.target for p in corpus])
    cfg = M.ModelConfig(src_vocab=len(vocab_joint), tgt_vocab=len(vocab_tgt),
                        depth=depth, dim=dim, heads=heads, ff_dim=2 * dim,
                        proj_dim=4, emb_dim=dim, max_len=8)
    return cfg, corpus, vocab_joint, vocab_tgt


def forward_probe(ckpt, corpus, vocab_src, vocab_tgt):
    """Deterministic forward output on a fixed probe batch."""
    from ce_nmt.data import batch_iter

    batch = next(batch_iter(corpus, vocab_src, vocab_tgt, 4, max_len=ckpt.config.max_len))
    latent = M.encode(batch.source_ids, batch.source_mask, ckpt.encoder, ckpt.config)
    if ckpt.decoder is None:
        return latent.values.values
    logits = M.decode(latent, batch.target_ids[:, :-1], batch.target_mask[:, :-1],
                      ckpt.decoder, ckpt.config)
    return logits.values


# -- optimizer -----------------------------------------------------------------

def test_adam_schedule_peaks_at_warmup():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    opt = TR.AdamOptimizer(p, lr=0.1, warmup=10)
    assert opt.rate(1) == pytest.approx(0.01)
    assert opt.rate(10) == pytest.approx(0.1)
    assert opt.rate(40) == pytest.approx(0.05)


def test_adam_moves_against_gradient():
    p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    opt = TR.AdamOptimizer(p, lr=0.1, warmup=1)
    p["w"].grad = np.array([1.0, -1.0])
    opt.step()
    assert p["w"].values[0] < 1.0
    assert p["w"].values[1] > -1.0


# -- stage 1 --------------------------------------------------------------------

def test_train_translation_zero_steps_equals_init():
    cfg, corpus, vs, vt = tiny_setup()
    ckpt = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    rng = np.random.default_rng(5)
    enc = M.init_encoder_params(cfg, rng)
    dec = M.init_decoder_params(cfg, rng)
    assert ckpt.encoder.allclose(enc)
    assert ckpt.decoder.allclose(dec)
    assert ckpt.step == 0 and ckpt.stage == "pretrain"


def test_train_translation_deterministic_loss_trajectory(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    logs = []
    for run in range(2):
        metrics = TR.MetricsLog(tmp_path / f"m{run}.jsonl")
        TR.train_translation(cfg, corpus, vs, vt, seed=7, steps=6, batch_size=8,
                             warmup=4, metrics=metrics)
        logs.append((tmp_path / f"m{run}.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_train_translation_loss_decreases_on_copy_task():
    corpus = make_identity_corpus(32, vocab_size=8, min_len=2, max_len=4, seed=1)
    vocab = build_vocab([p.source for p in corpus])
    cfg = M.ModelConfig(src_vocab=len(vocab), tgt_vocab=len(vocab), depth=1, dim=16,
                        heads=2, ff_dim=32, proj_dim=4, emb_dim=16, max_len=8)
    losses = []

    class Collect(TR.MetricsLog):
        def write(self, stage, step, loss, *a, **k):
            losses.append(loss)

    import tempfile
    with tempfile.TemporaryDirectory() as d:
        TR.train_translation(cfg, corpus, vocab, vocab, seed=2, steps=60, batch_size=16,
                             lr=3e-3, warmup=10, metrics=Collect(d + "/m.jsonl"))
    assert np.mean(losses[-5:]) < np.mean(losses[:5]) * 0.5


def test_train_translation_divergence_detected(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    # An absurd rate overflows float64 activations within a couple of steps;
    # the overflow itself is the point, so numpy's warning is silenced.
    with pytest.raises(DivergenceError), np.errstate(over="ignore", invalid="ignore"):
        TR.train_translation(cfg, corpus, vs, vt, seed=1, steps=10, batch_size=8,
                             lr=1e200, warmup=1, out_dir=tmp_path)
    assert list(tmp_path.glob("diverged-*.ckpt")), "diagnostic checkpoint persisted"


# -- stage 2 ----------------------------------------------------------------------

def test_context_enhance_zero_like_edge_and_start_identity():
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=1, batch_size=8, pooling="mean", proj_dim=4)
    ckpt = TR.context_enhance(start, corpus, vs, ce_cfg, seed=6)
    assert ckpt.stage == "ce"
    assert ckpt.projection is not None


def test_context_enhance_never_touches_decoder():
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=3, batch_size=8, warmup=2)
    before = {k: v.values.copy() for k, v in start.decoder.items()}
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=2, batch_size=8, proj_dim=4)
    ckpt = TR.context_enhance(start, corpus, vs, ce_cfg, seed=6)
    for k, v in ckpt.decoder.items():
        assert v.values.tobytes() == before[k].tobytes(), f"decoder param {k} changed"


def test_context_enhance_lambda_zero_reduces_to_invariance():
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    history: list = []
    ce_cfg = TR.CEConfig(lam=0.0, epochs=1, batch_size=8, proj_dim=4)
    TR.context_enhance(start, corpus, vs, ce_cfg, seed=6, history=history)
    rec = history[0]
    assert rec["total"] == pytest.approx(rec["invariance"], abs=1e-12)


def test_context_enhance_lambda_zero_redundancy_has_no_gradient():
    """With lam=0 the redundancy term must not influence gradients."""
    from ce_nmt import losses as L
    from ce_nmt import numerics as N

    rng = np.random.default_rng(0)
    zs = N.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    zt = N.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    L.barlow_twins_loss(zs, zt, lam=0.0).loss.backward()
    grad_total = zs.grad.copy()
    zs.zero_grad(); zt.zero_grad()

    def invariance_only(a, b):
        corr = L.cross_correlation(a, b)
        diag = N.diagonal(corr.tensor)
        return ((1.0 - diag) * (1.0 - diag)).sum()

    err = N.grad_check(invariance_only, [zs, zt])
    assert err < 1e-4
    assert np.max(np.abs(zs.grad - grad_total)) < 1e-12


def test_context_enhance_improves_alignment():
    cfg, corpus, vs, vt = tiny_setup(n_pairs=48, dim=16)
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    history: list = []
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=8, batch_size=16, proj_dim=4)
    TR.context_enhance(start, corpus, vs, ce_cfg, seed=6, lr=2e-3, warmup=5, history=history)
    assert history[-1]["invariance"] < history[0]["invariance"]


# -- stage 3 -----------------------------------------------------------------------

def test_finetune_requires_ce_checkpoint():
    cfg, corpus, vs, vt = tiny_setup()
    pre = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    with pytest.raises(ConfigError):
        TR.finetune_translation(pre, corpus, vs, vt, steps=1, seed=5)


def test_finetune_never_calls_projection(monkeypatch):
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    ce_ckpt = TR.context_enhance(start, corpus, vs, TR.CEConfig(lam=5e-3, epochs=1,
                                                                batch_size=8, proj_dim=4), seed=6)
    calls = {"n": 0}
    real_project = M.project

    def counting_project(*args, **kwargs):
        calls["n"] += 1
        return real_project(*args, **kwargs)

    monkeypatch.setattr(M, "project", counting_project)
    TR.finetune_translation(ce_ckpt, corpus, vs, vt, steps=3, seed=7, batch_size=8, warmup=2)
    assert calls["n"] == 0


def test_finetune_reuse_decoder_flag():
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=2, batch_size=8, warmup=2)
    ce_ckpt = TR.context_enhance(start, corpus, vs, TR.CEConfig(lam=5e-3, epochs=1,
                                                                batch_size=8, proj_dim=4), seed=6)
    reused = TR.finetune_translation(ce_ckpt, corpus, vs, vt, steps=0, seed=7, reuse_decoder=True)
    assert reused.decoder.allclose(start.decoder)
    fresh = TR.finetune_translation(ce_ckpt, corpus, vs, vt, steps=0, seed=7)
    assert not fresh.decoder.allclose(start.decoder)


# -- collapse monitor -----------------------------------------------------------------

def test_collapse_monitor_flags_identical_rows():
    mon = TR.CollapseMonitor()
    tied = np.ones((16, 8))
    mon.observe(tied)
    report = mon.observe(tied)
    assert report.status == "collapsed"
    assert "rank" in report.reason


def test_collapse_monitor_isotropic_rank_in_range():
    rng = np.random.default_rng(0)
    mon = TR.CollapseMonitor()
    mon.observe(rng.normal(size=(256, 8)))
    report = mon.observe(rng.normal(size=(256, 8)))
    assert report.status == "ok"
    assert 6.0 <= report.effective_rank <= 8.0


def test_collapse_monitor_single_batch_insufficient():
    mon = TR.CollapseMonitor()
    report = mon.observe(np.random.default_rng(1).normal(size=(32, 4)))
    assert report.status == "insufficient data"


def test_collapse_monitor_relative_std_drop():
    rng = np.random.default_rng(2)
    mon = TR.CollapseMonitor()
    mon.observe(rng.normal(size=(32, 4)))
    report = mon.observe(rng.normal(size=(32, 4)) * 1e-5)
    assert report.status == "collapsed"
    assert "std" in report.reason


def test_context_enhance_aborts_on_collapse(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    start = TR.train_translation(cfg, corpus, vs, vt, seed=5, steps=0)
    # Zero encoder output scale: tie every embedding row so pooled vectors collapse.
    for k, v in start.encoder.items():
        v.values[:] = 0.0
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=2, batch_size=8, proj_dim=4)
    with pytest.raises(CollapseError) as exc_info:
        TR.context_enhance(start, corpus, vs, ce_cfg, seed=6, out_dir=tmp_path)
    assert exc_info.value.report.status == "collapsed"
    assert list(tmp_path.glob("collapsed-*.ckpt"))


# -- checkpoint serialization -----------------------------------------------------------

def test_checkpoint_round_trip_bytes_and_outputs(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    ckpt = TR.train_translation(cfg, corpus, vs, vt, seed=9, steps=2, batch_size=8, warmup=2)
    path_a = TR.save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = TR.load_checkpoint(path_a)
    path_b = TR.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert path_a.read_bytes() == path_b.read_bytes()
    reloaded = TR.load_checkpoint(path_b)
    out_1 = forward_probe(loaded, corpus, vs, vt)
    out_2 = forward_probe(reloaded, corpus, vs, vt)
    assert np.array_equal(out_1, out_2)
    assert loaded.stage == ckpt.stage and loaded.seed == ckpt.seed and loaded.step == ckpt.step
    assert loaded.config == ckpt.config


def test_checkpoint_stage_constraints():
    cfg, corpus, vs, vt = tiny_setup()
    enc = M.init_encoder_params(cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        TR.Checkpoint(cfg, "ce", 0, 0, enc)          # ce needs projection
    with pytest.raises(ConfigError):
        TR.Checkpoint(cfg, "pretrain", 0, 0, enc)    # pretrain needs decoder


def test_checkpoint_rejects_non_checkpoint_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        TR.load_checkpoint(p)


def test_checkpoint_preserves_optimizer_state(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    ckpt = TR.train_translation(cfg, corpus, vs, vt, seed=9, steps=0)
    flat = TR._flatten({"encoder": ckpt.encoder, "decoder": ckpt.decoder})
    opt = TR.AdamOptimizer(flat, lr=0.01, warmup=5)
    for t in flat.values():
        t.grad = np.ones_like(t.values)
    opt.step()
    ckpt.optimizer = opt
    loaded = TR.load_checkpoint(TR.save_checkpoint(ckpt, tmp_path / "o.ckpt"))
    assert loaded.optimizer is not None
    assert loaded.optimizer.step_count == 1
    key = "encoder.in_w"
    assert np.allclose(loaded.optimizer.m[key], opt.m[key], atol=1e-7)


# -- pipeline ----------------------------------------------------------------------------

def test_run_pipeline_stage_tags_and_metrics_count(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=2, batch_size=8, proj_dim=4)
    result = TR.run_pipeline(cfg, ce_cfg, corpus, vs, vt, seed=3, out_dir=tmp_path,
                             steps=4, finetune_steps=3, batch_size=8, warmup=2)
    assert [result.checkpoints[s].stage for s in ("pretrain", "ce", "finetune")] == \
        ["pretrain", "ce", "finetune"]
    lines = result.metrics_path.read_text().splitlines()
    assert len(lines) == 4 + 2 + 3
    for path in result.paths.values():
        assert path.exists()


def test_run_pipeline_skip_pretrain(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=2, batch_size=8, proj_dim=4)
    result = TR.run_pipeline(cfg, ce_cfg, corpus, vs, vt, seed=3, out_dir=tmp_path,
                             steps=4, finetune_steps=2, batch_size=8, warmup=2,
                             skip_pretrain=True)
    assert set(result.checkpoints) == {"ce", "finetune"}
    assert len(list(tmp_path.glob("*.ckpt"))) == 2
    lines = result.metrics_path.read_text().splitlines()
    assert len(lines) == 2 + 2


def test_run_pipeline_metrics_byte_identical_at_64_bit(tmp_path):
    cfg, corpus, vs, vt = tiny_setup()
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=1, batch_size=8, proj_dim=4)
    blobs = []
    for run in range(2):
        result = TR.run_pipeline(cfg, ce_cfg, corpus, vs, vt, seed=11,
                                 out_dir=tmp_path / str(run), steps=3, finetune_steps=2,
                                 batch_size=8, warmup=2)
        blobs.append(result.metrics_path.read_bytes())
    assert blobs[0] == blobs[1]
    assert b'"wall_ms": null' in blobs[0]


def test_run_pipeline_float32_losses_reproducible(tmp_path):
    import json

    cfg, corpus, vs, vt = tiny_setup(dim=16)
    ce_cfg = TR.CEConfig(lam=5e-3, epochs=1, batch_size=8, proj_dim=4)
    runs = []
    for run in range(2):
        result = TR.run_pipeline(cfg, ce_cfg, corpus, vs, vt, seed=13,
                                 out_dir=tmp_path / str(run), steps=3, finetune_steps=2,
                                 batch_size=8, warmup=2, dtype=np.float32)
        lines = [json.loads(l) for l in result.metrics_path.read_text().splitlines()]
        runs.append(lines)
    for a, b in zip(*runs):
        assert abs(a["loss"] - b["loss"]) < 1e-6
    # float32 is the timing mode: wall_ms carries real milliseconds
    assert all(isinstance(l["wall_ms"], int) for l in runs[0])


def test_metrics_log_schema(tmp_path):
    import json

    metrics = TR.MetricsLog(tmp_path / "m.jsonl", record_time=True)
    metrics.write("pretrain", 1, 2.5)
    metrics.write("ce", 0, 1.0, 0.7, 6.0, 5e-3)
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert list(lines[0]) == ["stage", "step_or_epoch", "loss", "invariance_term",
                              "redundancy_term", "lambda", "wall_ms"]
    assert lines[0]["invariance_term"] is None
    assert lines[1]["lambda"] == 5e-3
    assert isinstance(lines[0]["wall_ms"], int)
