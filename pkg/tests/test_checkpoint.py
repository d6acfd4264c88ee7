import json

import numpy as np
import pytest

from tempomesh.checkpoint import MAGIC, load_checkpoint, param_hash, save_checkpoint
from tempomesh.errors import CheckpointError, FrozenParamsError, TrainingDivergedError
from tempomesh.history import RunHistory
from tempomesh.layers import FeedForward
from tempomesh.numerics import Tensor, log, make_rng, mul, tsum
from tempomesh.training import FrozenGuard, run_training


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return {
        "b.weight": rng.standard_normal((3, 2)).astype(np.float32),
        "a.bias": np.zeros(4, dtype=np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }


def test_save_and_load(temp_dir, params):
    """Parameters, step, metadata and generator position survive a round trip"""
    rng = make_rng(3)
    rng.standard_normal(10)
    path = save_checkpoint(temp_dir / "m.ckpt", params, step=42, rng=rng, metadata={"model": "vae"})
    ckpt = load_checkpoint(path)
    assert ckpt.step == 42
    assert ckpt.metadata == {"model": "vae"}
    assert set(ckpt.params) == set(params)
    for name, value in params.items():
        np.testing.assert_array_equal(ckpt.params[name], value)
    np.testing.assert_array_equal(ckpt.restore_rng().standard_normal(5), rng.standard_normal(5))


def test_equal_params_give_identical_bytes(temp_dir, params):
    """Insertion order does not change the file"""
    reordered = dict(reversed(list(params.items())))
    a = save_checkpoint(temp_dir / "a.ckpt", params)
    b = save_checkpoint(temp_dir / "b.ckpt", reordered)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(MAGIC)
    assert param_hash(params) == param_hash(reordered)


def test_corrupt_files_are_rejected(temp_dir, params):
    """Missing, foreign, truncated and padded files raise CheckpointError"""
    with pytest.raises(CheckpointError):
        load_checkpoint(temp_dir / "missing.ckpt")

    foreign = temp_dir / "foreign.ckpt"
    foreign.write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(foreign)

    path = save_checkpoint(temp_dir / "m.ckpt", params)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_without_rng(temp_dir, params):
    ckpt = load_checkpoint(save_checkpoint(temp_dir / "m.ckpt", params))
    with pytest.raises(CheckpointError):
        ckpt.restore_rng()


def _quadratic_loss(model):
    def loss_fn(rng, step):
        x = Tensor(rng.standard_normal((4, 3)).astype(np.float32))
        return tsum(mul(model(x), model(x)))

    return loss_fn


def test_run_training_writes_checkpoints(temp_dir):
    """Training records losses and checkpoints to the ledger"""
    model = FeedForward(3, 8, make_rng(0))
    history = RunHistory(temp_dir / "runs.json")
    history.start_session("train-test")
    result = run_training(
        "vae",
        model,
        _quadratic_loss(model),
        steps=4,
        rng=make_rng(1),
        lr=1e-2,
        checkpoint_every=2,
        checkpoint_path=temp_dir / "ckpt" / "vae.ckpt",
        metadata={"model": "test"},
        history=history,
    )
    assert result.steps == 4
    assert len(result.losses) == 4
    assert result.final_loss == result.losses[-1]
    ckpt = load_checkpoint(result.checkpoint)
    assert ckpt.step == 4
    assert ckpt.metadata["model"] == "test"
    assert ckpt.metadata["phase"] == "vae"
    checkpoints = [e for e in history.events if e["type"] == "checkpoint"]
    assert [e["step"] for e in checkpoints] == [2, 4]


def test_skipped_steps_leave_parameters_alone():
    """A loss function returning None skips the update"""
    model = FeedForward(3, 8, make_rng(0))
    before = param_hash(model.state_dict())
    result = run_training("diffusion", model, lambda rng, step: None, steps=3, rng=make_rng(0))
    assert result.skipped == 3
    assert result.losses == []
    assert param_hash(model.state_dict()) == before


def test_divergence_writes_dump(temp_dir):
    """A non-finite loss stops training with a diagnostic dump"""
    model = FeedForward(3, 4, make_rng(0))

    def loss_fn(rng, step):
        out = tsum(model(Tensor(np.ones((1, 3), dtype=np.float32))))
        if step < 3:
            return mul(out, out)
        return log(mul(out, 0.0))

    with pytest.raises(TrainingDivergedError) as info:
        run_training("tae", model, loss_fn, steps=5, rng=make_rng(0), checkpoint_path=temp_dir / "tae.ckpt")
    assert info.value.phase == "tae"
    assert info.value.step == 3
    dump = json.loads((temp_dir / "tae_diverged.json").read_text())
    assert dump["step"] == 3
    assert len(dump["recent_losses"]) == 2


def test_frozen_guard_detects_changes():
    """Changing a pinned module's parameters raises FrozenParamsError"""
    model = FeedForward(3, 4, make_rng(0))
    guard = FrozenGuard.pin(model)
    assert guard.check() == guard.expected_hash
    model.fc1.bias.data = model.fc1.bias.data + 1.0
    with pytest.raises(FrozenParamsError):
        guard.check()
