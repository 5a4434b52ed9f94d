import json
import time

import numpy as np
import pytest

from tailgraph.classifier import RegConfig
from tailgraph.diffcore import Parameter, no_grad, save_checkpoint
from tailgraph.graphdata import Batch, InstanceBalancedSampler, generate_synthetic, make_longtail, split
from tailgraph.optim import SGD, Adam
from tailgraph.retrieval import CorpusIndex, RetrieverParams
from tailgraph.trainer import (
    ModelState,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    finetune_classifier,
    fit,
    stage1_step,
    stage2_step,
    train_baseline_ce,
)


@pytest.fixture(scope="module")
def tiny_problem():
    full = generate_synthetic(4, 25, 0.6, seed=50)
    train, val, test = split(full, seed=51)
    train_lt, _ = make_longtail(train, 5.0, seed=52)
    params = RetrieverParams.init(train_lt.feature_dim, 8, 8, np.random.default_rng(53))
    index = CorpusIndex.build(train_lt, params)
    return train_lt, val, test, index


def _cfg(**kw):
    base = dict(
        epochs=3, finetune_epochs=2, batch_size=8, top_q=3,
        hidden_dim=12, embed_dim=12, num_layers=2, seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def _param_bytes(params):
    return b"".join(p.data.tobytes() for p in params)


def test_zero_branch_weights_bitwise_match_plain_step(tiny_problem):
    train, val, _, index = tiny_problem

    def one_step(cfg, index_arg):
        seeds = np.random.SeedSequence(0).spawn(2)
        model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                                np.random.default_rng(seeds[0]))
        opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
        batch = Batch(list(range(cfg.batch_size)))
        stage1_step(batch, train, model, index_arg, cfg, opt,
                    np.random.default_rng(seeds[1]))
        return _param_bytes(model.stage1_parameters())

    zeroed = one_step(_cfg(eta_ret=0.0, eta_con=0.0), index)
    plain = one_step(_cfg(use_retrieval=False, use_bscl=False), None)
    assert zeroed == plain


def test_total_loss_combines_with_configured_weights(tiny_problem):
    train, _, _, index = tiny_problem
    cfg = _cfg(eta_ret=0.1, eta_con=1.0)
    model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                            np.random.default_rng(1))
    opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
    rec = stage1_step(Batch(list(range(8))), train, model, index, cfg, opt,
                      np.random.default_rng(2))
    combined = rec["l_base"] + 0.1 * rec["l_ret"] + 1.0 * rec["l_con"]
    assert abs(rec["l_total"] - combined) < 1e-12


def test_fifty_steps_trend_downward(tiny_problem):
    train, _, _, index = tiny_problem
    cfg = _cfg(epochs=1)
    model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                            np.random.default_rng(3))
    opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
    sampler = InstanceBalancedSampler(train, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    losses = []
    cache = {}
    for _ in range(50):
        rec = stage1_step(sampler.sample(8), train, model, index, cfg, opt, rng, cache)
        losses.append(rec["l_total"])
    slope = np.polyfit(np.arange(50), losses, 1)[0]
    assert slope < 0


def test_stage2_updates_only_classifier(tiny_problem):
    train, val, _, index = tiny_problem
    cfg = _cfg()
    model, _ = fit(train, val, _cfg(use_weight_reg=False), index=index)
    encoder_before = _param_bytes(model.encoder.parameters())
    head_before = _param_bytes(model.head.parameters())
    clf_before = _param_bytes(model.classifier.parameters())
    finetune_classifier(model, train, val, cfg, RegConfig(),
                        rng=np.random.default_rng(6))
    assert _param_bytes(model.encoder.parameters()) == encoder_before
    assert _param_bytes(model.head.parameters()) == head_before
    assert _param_bytes(model.classifier.parameters()) != clf_before


def test_stage2_serialized_encoder_identical(tiny_problem, tmp_path):
    train, val, _, index = tiny_problem
    model, _ = fit(train, val, _cfg(use_weight_reg=False), index=index)
    before = tmp_path / "before.json"
    after = tmp_path / "after.json"
    save_checkpoint({p.name: p for p in model.encoder.parameters()}, before)
    finetune_classifier(model, train, val, _cfg(), RegConfig(),
                        rng=np.random.default_rng(7))
    save_checkpoint({p.name: p for p in model.encoder.parameters()}, after)
    assert before.read_bytes() == after.read_bytes()


def test_stage2_step_caps_row_norms(tiny_problem):
    train, _, _, _ = tiny_problem
    cfg = _cfg()
    reg = RegConfig(delta=0.3, lam=0.1)
    model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                            np.random.default_rng(8))
    model.classifier.weight.data *= 40.0  # start far outside the ball
    with no_grad():
        from tailgraph.encoder import embed_graphs

        emb = embed_graphs(train.graphs, model.encoder).data
    opt = SGD(model.classifier.parameters(), lr=cfg.lr_stage2)
    labels = train.labels()
    for _ in range(3):
        stage2_step(Batch(list(range(8))), model, reg, cfg, opt, emb, labels)
        norms = np.linalg.norm(model.classifier.weight.data, axis=1)
        assert norms.max() <= reg.delta + 1e-9


def test_frozen_encoder_losses_match_cached_embeddings(tiny_problem):
    train, val, _, index = tiny_problem
    cfg = _cfg()
    model, _ = fit(train, val, _cfg(use_weight_reg=False), index=index)
    from tailgraph.classifier import logits_and_ce
    from tailgraph.diffcore import Tensor
    from tailgraph.encoder import embed_graphs

    with no_grad():
        cached = embed_graphs(train.graphs, model.encoder).data
        recomputed = embed_graphs(train.graphs, model.encoder).data
    labels = train.labels()
    _, a = logits_and_ce(Tensor(cached[:8]), model.classifier, labels[:8])
    _, b = logits_and_ce(Tensor(recomputed[:8]), model.classifier, labels[:8])
    assert float(a.data) == float(b.data)


def test_fit_deterministic_under_seed(tiny_problem):
    train, val, _, index = tiny_problem
    cfg = _cfg(record_timing=False)
    _, h1 = fit(train, val, cfg, index=index)
    _, h2 = fit(train, val, cfg, index=index)
    assert [r.__dict__ for r in h1.records] == [r.__dict__ for r in h2.records]


def test_flags_off_equals_baseline(tiny_problem):
    train, val, _, _ = tiny_problem
    cfg = _cfg(use_retrieval=False, use_bscl=False, use_weight_reg=False,
               record_timing=False)
    m1, h1 = fit(train, val, cfg)
    m2, h2 = train_baseline_ce(train, val, _cfg(record_timing=False))
    assert [r.__dict__ for r in h1.records] == [r.__dict__ for r in h2.records]
    assert _param_bytes(m1.stage1_parameters()) == _param_bytes(m2.stage1_parameters())


def test_baseline_reaches_full_train_accuracy_on_clean_data():
    full = generate_synthetic(3, 12, 0.0, seed=60)
    train, val, _ = split(full, seed=61)
    cfg = TrainConfig(epochs=60, finetune_epochs=1, batch_size=8, top_q=2,
                      hidden_dim=16, embed_dim=16, num_layers=2, seed=0,
                      use_retrieval=False, use_bscl=False, use_weight_reg=False)
    model, _ = fit(train, val, cfg)
    assert accuracy(model, train) == 1.0


def test_divergence_aborts_with_exception(tiny_problem):
    train, _, _, index = tiny_problem
    cfg = _cfg()
    model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                            np.random.default_rng(9))
    model.classifier.weight.data[:] = np.inf
    opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
    with pytest.raises(TrainingDiverged):
        stage1_step(Batch([0, 1, 2]), train, model, index, cfg, opt,
                    np.random.default_rng(10))


def test_stage2_reduces_per_class_accuracy_spread():
    full = generate_synthetic(4, 40, 0.8, seed=80)
    train, val, test = split(full, seed=81)
    train_lt, _ = make_longtail(train, 8.0, seed=82)
    cfg = TrainConfig(epochs=60, finetune_epochs=20, batch_size=16, top_q=2,
                      hidden_dim=16, embed_dim=16, num_layers=2, seed=1,
                      use_retrieval=False, use_bscl=False, use_weight_reg=False)
    model, _ = fit(train_lt, val, cfg)

    def per_class_std(m):
        from tailgraph.evaluation import evaluate

        metrics = evaluate(m, test)
        return float(np.nanstd(metrics.per_class_acc))

    before = per_class_std(model)
    finetune_classifier(model, train_lt, val, cfg, RegConfig(delta=0.3, lam=0.1),
                        rng=np.random.default_rng(83))
    after = per_class_std(model)
    assert after <= before


def test_optimizers_ignore_zero_gradients():
    p = Parameter(np.array([1.0, 2.0]), name="p")
    for opt in (SGD([p], lr=0.5), Adam([p], lr=0.5)):
        before = p.data.copy()
        p.grad = np.zeros_like(p.data)
        opt.step()
        assert np.array_equal(p.data, before)
        p.grad = None
        opt.step()
        assert np.array_equal(p.data, before)


def test_config_round_trip_and_unknown_fields():
    cfg = _cfg(eta_ret=0.25)
    restored = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert restored == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"not_a_field": 1})


def test_step_time_scales_with_batch_size():
    import gc

    # enough distinct graphs that every batch size uses fresh indices
    train = generate_synthetic(4, 16, 0.4, seed=70)
    params = RetrieverParams.init(train.feature_dim, 8, 8, np.random.default_rng(71))
    index = CorpusIndex.build(train, params)
    cfg = _cfg(epochs=1)
    model = ModelState.init(train.feature_dim, train.num_classes, cfg,
                            np.random.default_rng(11))
    opt = Adam(model.stage1_parameters(), lr=cfg.lr_stage1)
    rng = np.random.default_rng(12)
    cache = {}
    sizes = [8, 16, 32, 64]
    times = []
    # warm up numba + retrieval cache
    stage1_step(Batch(list(range(64))), train, model, index, cfg, opt, rng, cache)
    gc.disable()
    try:
        for b in sizes:
            batch = Batch(list(range(b)))
            reps = []
            for _ in range(7):
                t0 = time.perf_counter()
                stage1_step(batch, train, model, index, cfg, opt, rng, cache)
                reps.append(time.perf_counter() - t0)
            times.append(min(reps))
    finally:
        gc.enable()
    x = np.array(sizes, dtype=float)
    y = np.array(times)
    design = np.stack([x, x * x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ coef
    ss_res = np.sum((y - pred) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot
    assert r2 >= 0.9, f"times {times} fit r2={r2:.3f}"
