"""PSNR scoring, benchmark runs and report formatting."""
from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from .denoiser import add_noise, denoise
from .operators import OperatorStack, make_operator
from .solver import SolverConfig, run
from .trainer import TaskSpec

PSNR_CAP = 100.0


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, cap: float | None = None) -> float:
    """10 log10(peak^2 / MSE) in dB over all channels and pixels; inf (or ``cap``) when identical."""
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a.detach().to(torch.float64) - b.detach().to(torch.float64)
    mse = float(torch.mean(diff * diff))
    value = math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
    return min(value, cap) if cap is not None else value


def batch_psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, cap: float | None = PSNR_CAP) -> list[float]:
    return [psnr(x, y, peak, cap) for x, y in zip(a, b)]


def degraded_baseline(op, x: torch.Tensor) -> float:
    """PSNR of the zero-filled projection against the ground truth, capped for reporting."""
    return psnr(op.project(x), x, cap=PSNR_CAP)


def ci_halfwidth(values: Sequence[float], level: float = 0.95) -> float | None:
    """Student-t confidence half-width of the mean; None with fewer than two values."""
    if len(values) < 2:
        return None
    arr = np.asarray(values, dtype=np.float64)
    sem = arr.std(ddof=1) / math.sqrt(arr.size)
    return float(stats.t.ppf(0.5 + level / 2, arr.size - 1) * sem)


def model_hash(model) -> str:
    h = hashlib.sha256()
    if hasattr(model, "state_dict"):
        for name, t in model.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().to(torch.float64).numpy().tobytes())
    h.update(type(model).__name__.encode())
    return h.hexdigest()[:16]


@dataclass
class EvalRow:
    task: str
    model: str
    setting: str
    mean_psnr: float
    per_image: list[float]
    seeds: list[int]
    ci95: float | None = None
    degraded: float | None = None
    error: str | None = None
    key: str = ""

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    baseline: str | None = None
    provenance: dict = field(default_factory=dict)
    degraded_label: str = "Degraded"

    def row(self, task: str, model: str, setting: str) -> EvalRow:
        for r in self.rows:
            if (r.task, r.model, r.setting) == (task, model, setting):
                return r
        raise KeyError((task, model, setting))

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def merge(self, other: "EvalReport") -> "EvalReport":
        keys = {r.key for r in self.rows}
        self.rows.extend(r for r in other.rows if r.key not in keys)
        self.provenance.update(other.provenance)
        return self

    def delta(self, row: EvalRow) -> float | None:
        if self.baseline is None or row.model == self.baseline or not row.ok:
            return None
        try:
            base = self.row(row.task, self.baseline, row.setting)
        except KeyError:
            return None
        return row.mean_psnr - base.mean_psnr if base.ok else None

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("key\ttask\tmodel\tsetting\tmean_psnr\tdelta\tci95\tdegraded\tseeds\tper_image\terror\n")
        for r in self.rows:
            d = self.delta(r)
            buf.write("\t".join([
                r.key, r.task, r.model, r.setting, _fmt(r.mean_psnr), _fmt(d), _fmt(r.ci95), _fmt(r.degraded),
                ",".join(map(str, r.seeds)), ",".join(f"{v:.4f}" for v in r.per_image), r.error or "",
            ]) + "\n")
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table: one line per (task, setting), one column per model, deltas in parentheses."""
        models = self.models()
        lines = []
        groups = list(dict.fromkeys((r.task, r.setting) for r in self.rows))
        header = ["Task", "Setting", self.degraded_label] + models
        body = []
        for task, setting in groups:
            cells = [task, setting]
            deg = next((r.degraded for r in self.rows if r.task == task and r.setting == setting
                        and r.degraded is not None), None)
            cells.append("-" if deg is None else f"{deg:.2f}")
            for m in models:
                try:
                    r = self.row(task, m, setting)
                except KeyError:
                    cells.append("-")
                    continue
                if not r.ok:
                    cells.append("failed")
                    continue
                d = self.delta(r)
                cells.append(f"{r.mean_psnr:.2f}" + ("" if d is None else f" ({d:+.2f})"))
            body.append(cells)
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        for row in [header] + body:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def provenance_json(self) -> str:
        return json.dumps(self.provenance, sort_keys=True, indent=2) + "\n"

    def write(self, directory, stem: str = "report") -> None:
        """Write TSV, aligned table and provenance; rows already on disk (same key) are kept, not duplicated."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tsv = directory / f"{stem}.tsv"
        if tsv.exists():
            existing = read_report_tsv(tsv)
            existing.baseline = self.baseline
            existing.degraded_label = self.degraded_label
            existing.merge(self)
            merged = existing
            merged.provenance = {**self.provenance}
            prov = directory / f"{stem}.provenance.json"
            if prov.exists():
                merged.provenance = {**json.loads(prov.read_text()), **self.provenance}
        else:
            merged = self
        tsv.write_text(merged.to_tsv())
        (directory / f"{stem}.txt").write_text(merged.to_table())
        (directory / f"{stem}.provenance.json").write_text(merged.provenance_json())


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def _parse(v: str):
    return None if v == "" else float(v)


def read_report_tsv(path) -> EvalReport:
    lines = Path(path).read_text().splitlines()
    report = EvalReport()
    for line in lines[1:]:
        f = line.split("\t")
        report.rows.append(EvalRow(
            task=f[1], model=f[2], setting=f[3], mean_psnr=float(f[4]),
            per_image=[float(v) for v in f[9].split(",") if v], seeds=[int(v) for v in f[8].split(",") if v],
            ci95=_parse(f[6]), degraded=_parse(f[7]), error=f[10] or None, key=f[0]))
    return report


def _row_key(model_digest: str, task: TaskSpec, setting: str, cfg, seeds, n_images: int) -> str:
    payload = json.dumps({
        "model": model_digest, "task": task.name, "kind": task.kind, "params": task.operator_params,
        "setting": setting, "config": None if cfg is None else cfg.__dict__, "seeds": list(seeds),
        "n_images": n_images,
    }, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _operator_seed(seed: int, task: str, index: int) -> int:
    digest = hashlib.sha256(f"{seed}:{task}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def solve_task(model, task: TaskSpec, images: torch.Tensor, cfg: SolverConfig, seed: int):
    """Degrade every image with its own operator, solve, clamp to [0, 1]; returns (outputs, descriptors, degraded PSNRs)."""
    dims = tuple(images.shape[-3:])
    descs = [task.descriptor(dims, _operator_seed(seed, task.name, i)) for i in range(images.shape[0])]
    op = OperatorStack([make_operator(d) for d in descs])
    xc = op.measure(images)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out, _ = run(model, op, xc, cfg, generator=gen, trace=False)
    degraded = batch_psnr(op.project(images), images)
    return out.clamp(0, 1), descs, degraded


def run_benchmark(models: Mapping[str, object], tasks: Sequence[TaskSpec], images: torch.Tensor,
                  configs: Mapping[str, SolverConfig | None], seeds: Sequence[int], baseline: str | None = None,
                  jobs: int = 1) -> EvalReport:
    """Score every (model, task, setting) over all images and seeds.

    A setting maps to a SolverConfig, or to None to use the task's own
    configuration.  Per-image PSNRs are averaged over seeds; the confidence
    interval is taken over per-seed means.  Failures are recorded on the row.
    """
    images = images.to(torch.float32)
    digests = {name: model_hash(m) for name, m in models.items()}
    work = [(mname, task, setting, cfg) for mname in models for task in tasks if task.iterative
            for setting, cfg in configs.items()]

    def one(item):
        mname, task, setting, cfg = item
        cfg = task.solver_config if cfg is None else cfg
        key = _row_key(digests[mname], task, setting, cfg, seeds, images.shape[0])
        try:
            per_seed, degraded = [], []
            for s in seeds:
                out, _, deg = solve_task(models[mname], task, images, cfg, s)
                per_seed.append(batch_psnr(out, images))
                degraded.append(float(np.mean(deg)))
            per_image = np.mean(np.asarray(per_seed), axis=0)
            seed_means = [float(np.mean(p)) for p in per_seed]
            return EvalRow(task.name, mname, setting, float(per_image.mean()), [float(v) for v in per_image],
                           list(seeds), ci_halfwidth(seed_means), float(np.mean(degraded)), key=key)
        except Exception as exc:  # recorded per row
            return EvalRow(task.name, mname, setting, math.nan, [], list(seeds), error=f"{type(exc).__name__}: {exc}",
                           key=key)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(one, work))
    else:
        rows = [one(w) for w in work]
    provenance = {
        "models": digests,
        "tasks": {t.name: {"kind": t.kind, "params": t.operator_params} for t in tasks if t.iterative},
        "settings": {name: None if c is None else c.__dict__ for name, c in configs.items()},
        "task_configs": {t.name: t.solver_config.__dict__ for t in tasks if t.iterative},
        "seeds": list(seeds),
        "n_images": int(images.shape[0]),
        "operator_seed_rule": "sha256('{seed}:{task}:{index}')[:8] little-endian >> 1",
    }
    return EvalReport(rows, baseline, provenance)


def noisy_input_psnr(images: torch.Tensor, sigma255: float, seed: int = 0) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    noisy = add_noise(images, sigma255, gen)
    return batch_psnr(noisy, images)


def denoise_benchmark(models: Mapping[str, object], sigmas: Sequence[float], images: torch.Tensor,
                      seed: int = 0, baseline: str | None = None) -> EvalReport:
    """One-shot denoising PSNR per sigma (0-255 scale); the degraded column is the unclipped noisy input."""
    images = images.to(torch.float32)
    rows = []
    for s in sigmas:
        if not 0 <= s <= 255:
            raise ValueError(f"sigma {s} outside [0, 255]")
        gen = torch.Generator().manual_seed(seed)
        noisy = add_noise(images, float(s), gen)
        inp = float(np.mean(batch_psnr(noisy, images)))
        for mname, model in models.items():
            task = f"sigma={s:g}"
            key = hashlib.sha256(f"{model_hash(model)}:{task}:{seed}:{images.shape[0]}".encode()).hexdigest()[:16]
            try:
                with torch.no_grad():
                    out = denoise(model, noisy, torch.full((images.shape[0],), s / 255.0)).clamp(0, 1)
                per = batch_psnr(out, images)
                rows.append(EvalRow(task, mname, "oneshot", float(np.mean(per)), per, [seed], None, inp, key=key))
            except Exception as exc:
                rows.append(EvalRow(task, mname, "oneshot", math.nan, [], [seed], None, inp,
                                    error=f"{type(exc).__name__}: {exc}", key=key))
    provenance = {"models": {n: model_hash(m) for n, m in models.items()}, "sigmas": list(sigmas), "seed": seed,
                  "n_images": int(images.shape[0])}
    return EvalReport(rows, baseline, provenance, degraded_label="Input")
