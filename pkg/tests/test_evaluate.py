import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import psnr_reference
from tweedie_inverse.denoiser import BiasFreeCNN, BiasFreeCNNConfig
from tweedie_inverse.evaluate import (EvalReport, EvalRow, batch_psnr, ci_halfwidth, degraded_baseline,
                                      denoise_benchmark, model_hash, noisy_input_psnr, psnr, read_report_tsv,
                                      run_benchmark)
from tweedie_inverse.operators import OperatorDescriptor, make_operator
from tweedie_inverse.solver import SolverConfig
from tweedie_inverse.trainer import builtin_task


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 50))
def test_psnr_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.random(n), rng.random(n)
    assert abs(psnr(torch.from_numpy(a), torch.from_numpy(b)) - psnr_reference(a, b)) < 1e-9


def test_psnr_edge_cases():
    x = torch.rand(3, 4, 4)
    assert psnr(x, x) == math.inf
    assert psnr(x, x, cap=100) == 100
    assert batch_psnr(x[None], x[None]) == [100.0]
    assert psnr(torch.zeros(4), torch.full((4,), 0.1)) == pytest.approx(20.0)
    assert psnr(torch.zeros(4), torch.full((4,), 25.5), peak=255) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(torch.zeros(3), torch.zeros(4))


def test_ci_halfwidth():
    assert ci_halfwidth([1.0]) is None
    vals = [1.0, 2.0, 4.0]
    expected = 4.302652729911275 * np.std(vals, ddof=1) / math.sqrt(3)
    assert ci_halfwidth(vals) == pytest.approx(expected, rel=1e-9)


def test_degraded_baseline_for_selection_operator():
    op = make_operator(OperatorDescriptor("inpaint_block", (1, 4, 4), {"block_size": 2}, 0))
    x = torch.ones(1, 4, 4)
    # 4 of 16 pixels zeroed: mse = 0.25
    assert degraded_baseline(op, x) == pytest.approx(10 * math.log10(4))


def tiny(seed=0):
    return BiasFreeCNN(BiasFreeCNNConfig(depth=2, channels=4, init_seed=seed))


def _images(n=3):
    return torch.rand(n, 3, 8, 8, generator=torch.Generator().manual_seed(0))


def test_benchmark_rows_and_determinism():
    tasks = [builtin_task("sr2"), builtin_task("inpaint", block_size=4), builtin_task("denoise")]
    configs = {"task": None, "t3": SolverConfig(max_iters=3)}
    models = {"a": tiny(0), "b": tiny(1)}
    r1 = run_benchmark(models, tasks, _images(), configs, seeds=[0, 1], baseline="a")
    r2 = run_benchmark(models, tasks, _images(), configs, seeds=[0, 1], baseline="a", jobs=2)
    assert len(r1.rows) == 2 * 2 * 2
    assert r1.to_tsv() == r2.to_tsv()
    row = r1.row("sr2", "b", "t3")
    assert len(row.per_image) == 3 and row.ci95 is not None and row.ok
    assert r1.delta(row) == pytest.approx(row.mean_psnr - r1.row("sr2", "a", "t3").mean_psnr)
    assert r1.delta(r1.row("sr2", "a", "t3")) is None
    assert len({r.key for r in r1.rows}) == len(r1.rows)
    one_seed = run_benchmark(models, tasks[:1], _images(), {"task": None}, seeds=[0])
    assert one_seed.rows[0].ci95 is None


def test_failures_are_recorded_per_row():
    class Broken(torch.nn.Module):
        def forward(self, y):
            raise RuntimeError("boom")

    rep = run_benchmark({"ok": tiny(), "bad": Broken()}, [builtin_task("sr2")], _images(),
                        {"t2": SolverConfig(max_iters=2)}, seeds=[0], baseline="ok")
    assert rep.row("sr2", "ok", "t2").ok
    bad = rep.row("sr2", "bad", "t2")
    assert not bad.ok and "boom" in bad.error
    assert "failed" in rep.to_table()


def test_table_shape_and_tsv_roundtrip(tmp_path):
    rep = EvalReport([
        EvalRow("inpaint", "base", "task", 20.0, [19.0, 21.0], [0], None, 10.0, key="k1"),
        EvalRow("inpaint", "ft", "task", 21.5, [21.0, 22.0], [0], None, 10.0, key="k2"),
    ], baseline="base")
    table = rep.to_table()
    lines = table.splitlines()
    assert lines[0].split() == ["Task", "Setting", "Degraded", "base", "ft"]
    assert "21.50 (+1.50)" in lines[2]
    rep.write(tmp_path)
    back = read_report_tsv(tmp_path / "report.tsv")
    back.baseline = "base"
    assert back.to_tsv() == rep.to_tsv()


def test_write_is_restart_safe(tmp_path):
    row = EvalRow("sr2", "m", "task", 25.0, [25.0], [0], None, 20.0, key="abc")
    EvalReport([row], provenance={"x": 1}, degraded_label="Input").write(tmp_path)
    first = (tmp_path / "report.tsv").read_text()
    EvalReport([row], provenance={"x": 1}, degraded_label="Input").write(tmp_path)
    assert (tmp_path / "report.tsv").read_text() == first
    assert "Input" in (tmp_path / "report.txt").read_text()
    new = EvalRow("sr2", "n", "task", 26.0, [26.0], [0], None, 20.0, key="def")
    EvalReport([new]).write(tmp_path)
    assert len((tmp_path / "report.tsv").read_text().splitlines()) == 3


def test_noisy_input_column():
    images = torch.rand(200, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    # unclipped noise at sigma=50/255 gives 20 log10(255/50) on average
    assert np.mean(noisy_input_psnr(images, 50)) == pytest.approx(20 * math.log10(255 / 50), abs=0.05)
    rep = denoise_benchmark({"a": tiny()}, [10, 50], images[:4], seed=0)
    assert rep.degraded_label == "Input"
    assert rep.row("sigma=10", "a", "oneshot").degraded > rep.row("sigma=50", "a", "oneshot").degraded
    with pytest.raises(ValueError):
        denoise_benchmark({"a": tiny()}, [300], images[:2])


def test_model_hash_tracks_weights():
    assert model_hash(tiny(0)) == model_hash(tiny(0)) != model_hash(tiny(1))
