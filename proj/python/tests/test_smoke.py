import json
import math
import pathlib

import numpy as np
import pytest

import gmt

ROOT = pathlib.Path(__file__).resolve().parents[2]
CONFIGS = ROOT / "configs"

TINY = {"L": 1, "H": 16, "N_h": 2, "D": 4, "F": 4, "T_max": 16, "V": 257}


def test_paper_parameter_counts():
    total, parts = gmt.parameter_count(str(CONFIGS / "paper_base.json"))
    assert total == 82_213_152
    assert parts["token_embedding"] == 50257 * 768
    assert gmt.parameter_count(str(CONFIGS / "paper_baseline.json"))[0] == 102_988_032


def test_schedules_and_perplexity():
    assert gmt.temperature_schedule(0, 2000, 1.0, 0.1) == 1.0
    assert gmt.temperature_schedule(2000, 2000, 1.0, 0.1) == 0.1
    assert gmt.lr_schedule(0, 50, 2000, 3e-4) == 0.0
    assert gmt.perplexity(3.2903) == pytest.approx(26.85, abs=0.01)


def test_forward_shapes_and_purity():
    m = gmt.create_model(TINY, seed=3)
    before = m.checksum()
    logits = m.forward([1, 2, 3, 4])
    assert logits.shape == (4, 257)
    assert np.isfinite(logits).all()
    assert m.checksum() == before
    m.forward([1, 2, 3, 4], adaptive=True)
    assert m.checksum() != before


def test_causal_prefix():
    m = gmt.create_model(TINY, seed=4)
    a = m.forward([5, 6, 7, 8])
    b = m.forward([5, 6, 7, 200])
    np.testing.assert_array_equal(a[:3], b[:3])


def test_usage_summary_uniform():
    s = gmt.usage_summary([0.25] * 4)
    assert s == {"n_eff": 4.0, "gini": 0.0, "top_share": 0.25, "unique": 4}
    assert gmt.entropy([0.5, 0.5]) == pytest.approx(math.log(2))


def test_trace_and_sweep():
    m = gmt.create_model(TINY, seed=5)
    records = m.trace("hello")
    assert len(records) == 5
    assert {"source_slot", "target_slot", "self_route"} <= set(records[0])
    rows = dict(m.sweep("hello world, again", [0.0, 1.0]))
    ids = gmt.encode("hello world, again")
    logits = m.forward(ids[:16])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = -np.mean([logp[i, ids[i + 1]] for i in range(16)])
    assert rows[1.0] == pytest.approx(ce, rel=1e-12)


def test_edges_csv_rows_sum_to_one():
    m = gmt.create_model(TINY, seed=6)
    lines = m.edges_csv(0, 4).strip().split("\n")
    assert len(lines) == 5
    for line in lines[1:]:
        cells = [float(x) for x in line.split(",")[2:6]]
        assert sum(cells) == pytest.approx(1.0, abs=1e-12)


def test_grad_check_toy():
    r = gmt.grad_check(str(CONFIGS / "toy.json"))
    assert r["max_relative_error"] <= 1e-4


def test_errors_map_to_python():
    with pytest.raises(gmt.ConfigurationError):
        gmt.create_model({"H": 10, "N_h": 3})
    m = gmt.create_model(TINY)
    with pytest.raises(gmt.DomainError):
        m.trace("")
    with pytest.raises(gmt.LoadError):
        gmt.load_checkpoint("/nonexistent/ckpt")


def test_train_round_trip(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for i in range(10):
        (corpus / f"d{i}.txt").write_text(f"the quick brown fox {i} jumps over the lazy dog.\n" * 3)
    n_train, n_val = gmt.prepare(str(corpus), str(tmp_path / "data"), 0.8)
    assert (n_train, n_val) == (8, 2)
    config = {"model": TINY, "train": {"B": 2, "A": 1, "warmup_steps": 1, "total_steps": 6, "eval_every": 3}}
    summary = gmt.train(config, tmp_path / "data", tmp_path / "run")
    assert summary["steps"] == 6
    assert len(summary["evals"]) >= 2
    state = gmt.load_checkpoint(str(tmp_path / "run" / "last.ckpt"))
    assert state.step == 6
    assert state.model.forward([1, 2, 3]).shape == (3, 257)
    state.save(str(tmp_path / "copy.ckpt"))
    again = gmt.load_checkpoint(str(tmp_path / "copy.ckpt"))
    assert again.model.checksum() == state.model.checksum()
    log = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert any("val_loss" in rec for rec in log)
