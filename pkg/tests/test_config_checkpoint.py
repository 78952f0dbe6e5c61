import math

import numpy as np
import pytest

from refactor_kgc.checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from refactor_kgc.config import ConfigError, RunConfig, parse_config_text
from refactor_kgc.graph import add_reciprocals
from refactor_kgc.runner import CompatibilityError, build_run, restore_run, run_header
from refactor_kgc.synthetic import make_graph, random_triples


def test_config_defaults_and_roundtrip():
    cfg = parse_config_text("mode = refactor\nmodel = distmult\ndim = 8  # comment\nlayers = 3\nalpha = none\n")
    assert cfg.layers == 3 and cfg.finite_layers == 3 and cfg.alpha is None
    assert RunConfig().layers == math.inf and RunConfig().finite_layers is None
    again = parse_config_text(cfg.dumps())
    assert again == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "text, needle",
    [
        ("learning_rat = 0.1", "learning_rat"),
        ("dim = ten", "dim"),
        ("mode = gnn", "mode"),
        ("model = complex\ndim = 7", "even"),
        ("rp_weight = -1", "rp_weight"),
        ("just a line", "key = value"),
        ("dim = 4\ndim = 8", "duplicate"),
    ],
)
def test_config_errors(text, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert needle in str(exc.value)


def test_checkpoint_layout(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
    save_checkpoint(tmp_path / "c.ckpt", {"note": "x"}, arrays)
    header, back = load_checkpoint(tmp_path / "c.ckpt")
    assert header["note"] == "x" and [a["name"] for a in header["arrays"]] == ["a", "b"]
    for k in arrays:
        assert np.array_equal(arrays[k], back[k])
    _, offset = read_header(tmp_path / "c.ckpt")
    size = (tmp_path / "c.ckpt").stat().st_size
    assert size - offset == (12 + 5) * 8
    raw = (tmp_path / "c.ckpt").read_bytes()[offset:offset + 8]
    assert np.frombuffer(raw, "<f8")[0] == arrays["a"][0, 0]


def test_checkpoint_f32_and_truncation(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4))}
    save_checkpoint(tmp_path / "c.ckpt", {}, arrays, f32=True)
    _, back = load_checkpoint(tmp_path / "c.ckpt")
    assert np.allclose(back["a"], arrays["a"], atol=1e-6) and not np.array_equal(back["a"], arrays["a"])
    data = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "j.ckpt").write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "j.ckpt")


def _graph(rng, n=25, k=80):
    return add_reciprocals(make_graph(random_triples(n, 3, k, rng), n, 3))


@pytest.mark.parametrize(
    "overrides",
    [
        dict(mode="fm", model="cp", dim=6, batch_size=16, rp_weight=0.5, reg_weight=0.01, forget_interval=7),
        dict(mode="fm", model="tucker", dim=4, relation_dim=3, batch_size=16, softmax_mode="sampled"),
        dict(mode="refactor", model="distmult", dim=6, batch_size=16, layers=2, layer_optimizer="adagrad"),
        dict(mode="refactor", model="complex", dim=6, batch_size=16, softmax_mode="sampled"),
    ],
)
def test_resume_is_bitwise(tmp_path, rng, overrides):
    g = _graph(rng)
    cfg = RunConfig(**overrides)
    straight = build_run(cfg, g)
    straight.run_epoch()
    save_checkpoint(tmp_path / "mid.ckpt", run_header(straight), straight.arrays())
    straight.run_epoch()

    header, arrays = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = restore_run(header, arrays, g)
    assert resumed.cfg == cfg
    resumed.run_epoch()
    a, b = straight.arrays(), resumed.arrays()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    assert straight.step == resumed.step


def test_restore_rejects_other_graph(tmp_path, rng):
    g = _graph(rng)
    run = build_run(RunConfig(model="distmult", dim=4), g)
    save_checkpoint(tmp_path / "c.ckpt", run_header(run), run.arrays())
    header, arrays = load_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(CompatibilityError):
        restore_run(header, arrays, _graph(rng, n=30))
