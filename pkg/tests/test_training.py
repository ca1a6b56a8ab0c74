import numpy as np
import orjson
import pytest

from services import nncore as nn
from services.config import TrainConfig, load_config
from services.dataio import COND_DIM, TrainingArrays, split_dataset
from services.diffusion import make_schedule
from services.errors import InvalidArgument, NonFiniteLoss, ShapeMismatch
from services.metrics import evaluate_clips, jitter, mean_local_pose, mean_pose_baseline, rest_pose_baseline
from services.model import SCALE_DIMS, MageModel
from services.motion_synth import synth_dataset
from services.nncore import Tensor
from services.pipeline import Engine, sample_references
from services.settings import DESK_CONFIG_PATH
from services.training import Trainer, objective, sample_batch, stage_losses, train_from_clips


def random_arrays(rng, windows: int = 6, n: int = 8) -> TrainingArrays:
    return TrainingArrays(
        cond=rng.normal(size=(windows, n, COND_DIM)),
        targets={sid: rng.normal(size=(windows, n, d)) for sid, d in SCALE_DIMS.items()},
    )


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=4, steps=10, lr=1e-3, seed=11, dtype="float64", log_every=5)
    base.update(overrides)
    return TrainConfig(**base)


def test_perfect_prediction_has_zero_loss(rng):
    targets = {sid: rng.normal(size=(2, 8, d)) for sid, d in SCALE_DIMS.items()}
    preds = {sid: Tensor(v.copy()) for sid, v in targets.items()}
    assert [float(L.data) for L in stage_losses(preds, targets)] == [0.0, 0.0, 0.0]


def test_constant_offset_loss(rng):
    targets = {sid: rng.normal(size=(2, 8, d)) for sid, d in SCALE_DIMS.items()}
    preds = {sid: Tensor(v + 0.5) for sid, v in targets.items()}
    for L in stage_losses(preds, targets):
        assert float(L.data) == pytest.approx(0.25, abs=1e-12)


def test_stage_loss_matches_accumulation_loop(rng):
    targets = {sid: rng.normal(size=(3, 8, d)) for sid, d in SCALE_DIMS.items()}
    preds = {sid: Tensor(rng.normal(size=v.shape)) for sid, v in targets.items()}
    losses = stage_losses(preds, targets)
    for L, sid in zip(losses, ("S1", "S2", "S3")):
        total, count = 0.0, 0
        for a, b in zip(preds[sid].data.reshape(-1), targets[sid].reshape(-1)):
            total += (a - b) ** 2
            count += 1
        assert abs(float(L.data) - total / count) < 1e-12


def test_missing_stage_contributes_zero(rng):
    targets = {"S3": rng.normal(size=(1, 8, 132))}
    L1, L2, L3 = stage_losses({"S3": Tensor(targets["S3"] + 1.0)}, targets)
    assert float(L1.data) == 0.0 and float(L2.data) == 0.0
    assert float(L3.data) == pytest.approx(1.0)


def test_stage_loss_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        stage_losses({"S3": Tensor(np.zeros((1, 8, 132)))}, {"S3": np.zeros((1, 7, 132))})


def test_objective():
    assert objective(0.1, 0.2, 0.3, (1.0, 1.0, 1.0)) == pytest.approx(0.6)
    assert objective(0.1, 0.2, 0.3, (0.0, 0.0, 1.0)) == 0.3
    rng = np.random.default_rng(0)
    for _ in range(20):
        L, w = rng.uniform(size=3), rng.uniform(size=3)
        assert objective(*L, w) == w[0] * L[0] + w[1] * L[1] + w[2] * L[2]


def test_objective_on_tensors_backpropagates():
    L = [Tensor(np.array(v), requires_grad=True) for v in (0.1, 0.2, 0.3)]
    out = objective(*L, (2.0, 0.5, 1.0))
    nn.backward(out)
    assert [float(x.grad) for x in L] == [2.0, 0.5, 1.0]


def test_sample_batch_draw_order(rng):
    arrays = random_arrays(rng)
    sched = make_schedule(50)
    batch = sample_batch(arrays, ["S1", "S3"], 4, sched, np.random.default_rng(3))
    ref = np.random.default_rng(3)
    idx = ref.integers(0, len(arrays), size=4)
    np.testing.assert_array_equal(batch.t, ref.integers(1, 51, size=4))
    np.testing.assert_array_equal(batch.cond, arrays.cond[idx])
    assert set(batch.targets) == {"S1", "S3"}
    assert batch.noise.shape == (4, 8, 132)
    assert batch.t.min() >= 1 and batch.t.max() <= 50


def run(tiny_config, arrays, cfg, steps=10):
    model = MageModel(tiny_config, dtype=np.float64, seed=cfg.seed)
    trainer = Trainer(model, make_schedule(tiny_config.T, tiny_config.schedule), arrays, cfg)
    history = trainer.fit(steps, progress=False)
    return model, trainer, history


def test_training_is_bit_reproducible(tiny_config, rng):
    arrays = random_arrays(rng)
    a, _, hist_a = run(tiny_config, arrays, tiny_train_config())
    b, _, hist_b = run(tiny_config, arrays, tiny_train_config())
    for (name, p), (_, q) in zip(a.store, b.store):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)
    assert [r["l_obj"] for r in hist_a] == [r["l_obj"] for r in hist_b]


def test_zero_lr_leaves_parameters(tiny_config, rng):
    arrays = random_arrays(rng)
    cfg = tiny_train_config(lr=0.0)
    fresh = MageModel(tiny_config, dtype=np.float64, seed=cfg.seed)
    model, trainer, _ = run(tiny_config, arrays, cfg)
    for (name, p), (_, q) in zip(model.store, fresh.store):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)
    assert trainer.state.step == 10


def test_zero_steps_is_a_no_op(tiny_config, rng):
    arrays = random_arrays(rng)
    cfg = tiny_train_config()
    fresh = MageModel(tiny_config, dtype=np.float64, seed=cfg.seed)
    model, trainer, history = run(tiny_config, arrays, cfg, steps=0)
    assert history == [] and trainer.state.step == 0
    for (name, p), (_, q) in zip(model.store, fresh.store):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)
    with pytest.raises(InvalidArgument):
        trainer.fit(-1, progress=False)


def test_history_and_log_file(tiny_config, rng, tmp_path):
    arrays = random_arrays(rng)
    cfg = tiny_train_config(log_every=4)
    model = MageModel(tiny_config, dtype=np.float64, seed=1)
    trainer = Trainer(model, make_schedule(tiny_config.T), arrays, cfg)
    log = tmp_path / "train.jsonl"
    history = trainer.fit(10, log_path=log, progress=False)
    assert [r["step"] for r in history] == [0, 4, 8, 9]
    lines = [orjson.loads(line) for line in log.read_bytes().splitlines()]
    assert [r["step"] for r in lines] == [0, 4, 8, 9]
    assert set(lines[0]) >= {"l1", "l2", "l3", "l_obj", "smoothed", "lr", "grad_norm", "wall_time"}
    assert all(r["l_obj"] >= 0 for r in lines)


def test_eval_hook_merges_values(tiny_config, rng):
    arrays = random_arrays(rng)
    cfg = tiny_train_config(eval_every=3, log_every=100)
    model = MageModel(tiny_config, dtype=np.float64, seed=1)
    trainer = Trainer(model, make_schedule(tiny_config.T), arrays, cfg)
    calls = []

    def evaluate(m):
        calls.append(m)
        return {"mpjpe": 1.5}

    history = trainer.fit(7, progress=False, eval_fn=evaluate)
    assert len(calls) == 3
    assert [r["step"] for r in history if "eval_mpjpe" in r] == [0, 3, 6]


def test_non_finite_input_aborts_with_diagnostics(tiny_config, rng):
    arrays = random_arrays(rng)
    arrays.cond[:] = np.inf
    model = MageModel(tiny_config, dtype=np.float64, seed=1)
    trainer = Trainer(model, make_schedule(tiny_config.T), arrays, tiny_train_config())
    with pytest.raises(NonFiniteLoss) as info:
        trainer.step()
    assert info.value.diagnostics["step"] == 0
    assert len(info.value.diagnostics["t"]) == 4


def test_trainer_needs_targets_for_every_stage(tiny_config, rng):
    arrays = random_arrays(rng)
    del arrays.targets["S2"]
    model = MageModel(tiny_config)
    with pytest.raises(ShapeMismatch):
        Trainer(model, make_schedule(tiny_config.T), arrays, tiny_train_config())


def test_train_from_clips_smoke(skel, scales):
    cfg = load_config(DESK_CONFIG_PATH)
    small = cfg.model.model_copy(update={"latent_dim": 16, "blocks": [1, 1, 1], "T": 50})
    cfg = cfg.model_copy(update={"model": small})
    clips = synth_dataset("mixed", 3, frames=130, seed=2)
    result = train_from_clips(clips, cfg, skel, scales, steps=3, progress=False)
    assert [r["step"] for r in result.history] == [0, 2]
    assert result.sched.T == 50
    assert result.model.store["embed/W"].data.dtype == np.float32
    assert set(result.stats.target_mean) == {"S1", "S2", "S3"}


@pytest.mark.slow
def test_desk_scale_run(skel, scales):
    cfg = load_config(DESK_CONFIG_PATH)
    d = cfg.data
    clips = synth_dataset(d.kind, d.count, frames=d.frames, fps=d.fps, seed=d.seed)
    train, test = split_dataset(clips, d.holdout, seed=d.seed)
    result = train_from_clips(train, cfg, skel, scales, progress=False)
    first, last = result.history[0], result.history[-1]
    assert last["smoothed"] <= 0.2 * first["l_obj"]

    engine = Engine(result.model, result.stats, result.sched)
    preds = sample_references(test, engine, cfg.inference, skel)
    model_pe = evaluate_clips(preds, test, skel).aggregate.mpjpe
    rest = [rest_pose_baseline(g, skel) for g in test]
    mean_pose = mean_local_pose(train)
    mean = [mean_pose_baseline(g, mean_pose, skel) for g in test]
    assert model_pe <= 0.5 * evaluate_clips(rest, test, skel).aggregate.mpjpe
    assert model_pe <= 0.8 * evaluate_clips(mean, test, skel).aggregate.mpjpe

    gen_jitter = np.mean([jitter(p, skel) for p in preds])
    gt_jitter = np.mean([jitter(g, skel) for g in test])
    assert gen_jitter <= 3.0 * gt_jitter
