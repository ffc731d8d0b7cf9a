"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch

from cityforge.cli import main
from cityforge.cluster import hdbscan
from cityforge.flow.io import checkpoint_bytes
from cityforge.flow.model import FlowConfig, FlowModel, SinglePathwayBlock, dual_block, parameter_count
from cityforge.flow.objective import FlowBatch, cfm_loss, grad_check
from cityforge.flow.sampling import sample
from cityforge.flow.toy import TOY_CONFIG, ring_dataset, ring_samples, toy_conditions
from cityforge.flow.training import Schedule, train
from cityforge.geo import BuildingRecord, parse_region
from cityforge.latent import Latent, cosine_interpolate, sample_noise
from cityforge.metrics import chamfer, fscore, iou_top, pairwise_cos, regional_score
from cityforge.scene import parse_mesh
from cityforge.voxels import building_frame, extrude_lod0, extrude_lod1, rasterize_topdown
from oracles import (
    adjusted_rand,
    blob_with_outliers,
    brute_chamfer,
    brute_fscore,
    chamfer_2d,
    random_rectilinear,
    reference_hdbscan,
    renumber,
    shapely_raster,
    three_blobs,
)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:2d} [{title}]: {detail}")
        assert ok, detail

    return report


def test_criterion_01_metric_oracles(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_cd = worst_f = 0.0
    for _ in range(20):
        a, b = rng.random((100, 3)), rng.random((100, 3))
        tau = float(rng.uniform(0.05, 0.2))
        worst_cd = max(worst_cd, abs(chamfer(a, b) - brute_chamfer(a, b)))
        worst_f = max(worst_f, abs(fscore(a, b, tau) - brute_fscore(a, b, tau)))
    elapsed = time.perf_counter() - start
    ok = worst_cd <= 1e-12 and worst_f <= 1e-12 and elapsed < 5.0
    verdict(1, "metric oracles", ok, f"max |dCD|={worst_cd:.2e}, max |dF|={worst_f:.2e}, {elapsed:.2f}s")


def test_criterion_02_interpolation_identities(verdict):
    shape = (10, 100)  # 10^3 cells x 100 channels = 10^5 elements
    p, e = sample_noise(shape, 1), sample_noise(shape, 2)
    ends = np.array_equal(cosine_interpolate(p, e, 0.0).values, p.values) and np.array_equal(
        cosine_interpolate(p, e, 1.0).values, e.values
    )
    half = np.abs(cosine_interpolate(p, e, 0.5).values - math.sqrt(2) / 2 * (p.values + e.values)).max()
    variances = {lam: float(cosine_interpolate(p, e, lam).values.var()) for lam in (0.25, 0.5, 0.75)}
    var_ok = all(abs(v - 1.0) <= 0.02 for v in variances.values())
    ok = ends and half <= 1e-12 and var_ok
    detail = f"endpoints bitwise={ends}, half err={half:.2e}, var={ {k: round(v, 4) for k, v in variances.items()} }"
    verdict(2, "cosine interpolation", ok, detail)


class _OracleField(torch.nn.Module):
    def __init__(self, velocity: torch.Tensor):
        super().__init__()
        self.velocity = velocity

    def forward(self, x, t, c_t, c_f):
        return self.velocity.expand_as(x)


def test_criterion_03_flow_sanity(verdict):
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 8, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 8, 3, generator=g, dtype=torch.float64)
    t = torch.rand(4, generator=g, dtype=torch.float64)
    c = torch.zeros(4, 2, 2, dtype=torch.float64)
    field = _OracleField(eps - x0)
    loss = cfm_loss(field, FlowBatch(x0, eps, t, c, c)).item()
    errs = {
        (solver, steps): (sample(field, eps, c, c, steps, solver) - x0).abs().max().item()
        for solver in ("euler", "heun")
        for steps in (1, 8, 64)
    }
    ok = loss <= 1e-12 and max(errs.values()) <= 1e-9
    verdict(3, "flow sanity", ok, f"loss={loss:.2e}, max sampler err={max(errs.values()):.2e}")


def test_criterion_04_gradient_check(verdict):
    start = time.perf_counter()
    cfg = FlowConfig(channels=4, resolution=2, d_model=16, heads=2, blocks=1, d_cond=8)
    model = FlowModel.from_seed(cfg, 0, tie_pathways=False, dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    shape = (3, cfg.tokens, cfg.channels)
    batch = FlowBatch(
        torch.randn(shape, generator=g, dtype=torch.float64),
        torch.randn(shape, generator=g, dtype=torch.float64),
        torch.rand(3, generator=g, dtype=torch.float64),
        torch.randn(3, 4, cfg.d_cond, generator=g, dtype=torch.float64),
        torch.randn(3, 5, cfg.d_cond, generator=g, dtype=torch.float64),
    )
    n_params = parameter_count(model)
    err = grad_check(model, batch, samples=200)
    elapsed = time.perf_counter() - start
    ok = n_params <= 10_000 and err <= 1e-4 and elapsed < 60.0
    verdict(4, "gradient check", ok, f"{n_params} params, max rel err={err:.2e}, {elapsed:.2f}s")


def test_criterion_05_dual_pathway_symmetry(verdict):
    cfg = FlowConfig(channels=4, resolution=2, d_model=32, heads=4, blocks=1, d_cond=16)
    block = FlowModel.from_seed(cfg, 3, tie_pathways=True, dtype=torch.float64).blocks[0]
    g = torch.Generator().manual_seed(5)
    h = torch.randn(2, cfg.tokens, cfg.d_model, generator=g, dtype=torch.float64)
    c = torch.randn(2, 6, cfg.d_cond, generator=g, dtype=torch.float64)
    diff = (dual_block(h, c, c, block) - SinglePathwayBlock.from_dual(block)(h, c)).abs().max().item()
    verdict(5, "dual pathway symmetry", diff <= 1e-6, f"max abs diff={diff:.2e}")


def _toy_flow(seed: int):
    data = ring_dataset(4096, seed=seed, config=TOY_CONFIG)
    torch.manual_seed(seed)
    result = train(FlowModel.from_seed(TOY_CONFIG, seed), data, Schedule(steps=1500, batch_size=128, lr=0.02, seed=seed))
    return data, result


def test_criterion_06_toy_transport(verdict):
    start = time.perf_counter()
    data, result = _toy_flow(0)
    c_t, c_f = (torch.as_tensor(a, dtype=torch.float32) for a in toy_conditions(TOY_CONFIG, seed=1))
    init = torch.randn(2048, 1, 2, generator=torch.Generator().manual_seed(11))
    with torch.no_grad():
        gen = sample(result.model, init, c_t, c_f, 64).reshape(-1, 2).double().numpy()
    rng = np.random.Generator(np.random.Philox(77))
    target, other = ring_samples(2048, rng), ring_samples(2048, rng)
    ratio = chamfer_2d(gen, target) / chamfer_2d(other, target)
    _, again = _toy_flow(0)
    reproducible = again.losses == result.losses and checkpoint_bytes(again.model) == checkpoint_bytes(result.model)
    elapsed = time.perf_counter() - start
    ok = ratio <= 3.0 and reproducible and elapsed < 300.0
    verdict(6, "toy flow transport", ok, f"chamfer ratio={ratio:.3f}, reproducible={reproducible}, {elapsed:.1f}s for two runs")


def test_criterion_07_prior_alignment(verdict):
    rng = np.random.default_rng(7)
    ious, subset = [], True
    while len(ious) < 20:
        ring = random_rectilinear(rng)
        if ring is None:
            continue
        rec = BuildingRecord(f"r{len(ious)}", ring, float(rng.uniform(5, 40)))
        frame = building_frame(rec, 64)
        lod1, lod0 = extrude_lod1(rec, frame), extrude_lod0(rec, frame)
        subset &= bool(np.all(lod1.occupancy <= lod0.occupancy))
        top = rasterize_topdown(lod1, 64).bits.T  # (x, y)
        oracle = shapely_raster([rec.outer], frame.centers(0), frame.centers(1))
        ious.append((top & oracle).sum() / (top | oracle).sum())
    ok = min(ious) >= 0.98 and subset
    verdict(7, "prior alignment", ok, f"min IoU={min(ious):.4f} over 20 footprints, LOD1 within LOD0={subset}")


def test_criterion_08_hdbscan(verdict):
    x, truth = three_blobs(seed=7)
    res = hdbscan(x, 10, 5)
    ari = adjusted_rand(truth, res.labels)
    ref, _ = reference_hdbscan(x, 10, 5)
    agree = bool(np.array_equal(renumber(ref), res.labels))
    xo, is_out = blob_with_outliers()
    out_res = hdbscan(xo, 20, 10, allow_single_cluster=True)
    noise_frac = float(np.mean(out_res.labels[is_out == 1] == -1))
    ok = ari >= 0.95 and agree and noise_frac >= 0.8
    verdict(8, "HDBSCAN", ok, f"ARI={ari:.4f}, reference agreement={agree}, outliers as noise={noise_frac:.2f}")


def _mask_with_iou(k: int) -> tuple[np.ndarray, np.ndarray]:
    ref = np.zeros((8, 8), bool)
    ref[2:6, 2:6] = True
    gen = np.zeros((8, 8), bool)
    gen.flat[np.flatnonzero(ref)[:k]] = True
    return gen, ref


def _pair_with_cos(c: float) -> np.ndarray:
    return np.array([[1.0, 0.0], [c, math.sqrt(1.0 - c * c)]])


def test_criterion_09_consistency_score(verdict):
    mask = _mask_with_iou(16)[1]
    same = np.repeat(np.random.default_rng(0).normal(size=(1, 32)), 6, axis=0)
    identical = regional_score(iou_top(mask, mask), pairwise_cos(same))
    zero = regional_score(iou_top(mask, np.roll(mask, 4, axis=0)), pairwise_cos(same))
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    grid = np.array(
        [[regional_score(iou_top(*_mask_with_iou(int(16 * a))), pairwise_cos(_pair_with_cos(b))) for b in levels] for a in levels]
    )
    monotone = bool(np.all(np.diff(grid, axis=0) >= 0) and np.all(np.diff(grid, axis=1) >= 0))
    ok = identical == 1.0 and zero == 0.0 and monotone
    verdict(9, "consistency score", ok, f"identical={identical!r}, zero-IoU={zero!r}, monotone on 5x5={monotone}")


def test_criterion_10_promptgen(verdict):
    from cityforge.promptgen import Category, CompatibilityRule, DescriptorLibrary, enumerate_prompts
    from oracles import cartesian_prompts

    rng = np.random.default_rng(10)
    mismatches, libraries = 0, 0
    while libraries < 50:
        cats = [(f"c{i}", tuple(f"o{j}" for j in range(int(rng.integers(1, 8))))) for i in range(int(rng.integers(1, 6)))]
        if math.prod(len(c[1]) for c in cats) > 10_000:
            continue
        rules = []
        for _ in range(int(rng.integers(0, 10)) if len(cats) > 1 else 0):
            i, j = rng.choice(len(cats), 2, replace=False)
            rules.append(((cats[i][0], str(rng.choice(cats[i][1]))), (cats[j][0], str(rng.choice(cats[j][1])))))
        lib = DescriptorLibrary(tuple(Category(n, o) for n, o in cats))
        got = {tuple(o for _, o in r.assignment) for r in enumerate_prompts(lib, [CompatibilityRule(a, b) for a, b in rules])}
        mismatches += got != set(cartesian_prompts(cats, rules))
        libraries += 1
    demo = DescriptorLibrary(
        (
            Category("function", ("residential", "industrial")),
            Category("wall", ("brick", "glass curtain wall")),
            Category("roof", ("flat", "gabled")),
        )
    )
    n_demo = len(enumerate_prompts(demo, [CompatibilityRule(("function", "industrial"), ("wall", "glass curtain wall"))]))
    ok = mismatches == 0 and n_demo == 6
    verdict(10, "promptgen equivalence", ok, f"{mismatches} mismatches over 50 libraries, demo yields {n_demo} of 8")


def _oriented_closed(tris: np.ndarray) -> bool:
    """Every directed edge appears once and its reverse once."""
    directed = {}
    for a, b, c in tris.tolist():
        for e in ((a, b), (b, c), (c, a)):
            directed[e] = directed.get(e, 0) + 1
    return all(n == 1 and directed.get((b, a)) == 1 for (a, b), n in directed.items())


def _upward_centroid(mesh) -> tuple[float, float]:
    import shapely

    v = mesh.vertices[mesh.triangles]
    nz = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])[:, 2]
    shape = shapely.unary_union([shapely.Polygon(t[:, :2]) for t in v[nz > 0]])
    return shape.centroid.x, shape.centroid.y


def _footprint_centroid(rec: BuildingRecord) -> tuple[float, float]:
    import shapely

    c = shapely.Polygon(rec.outer, holes=list(rec.holes)).centroid
    return c.x, c.y


def test_criterion_11_end_to_end(verdict, demo_dir):
    cfg = str(demo_dir / "demo_config.json")
    checksums, codes = [], []
    for out in ("run_a", "run_b"):
        for cmd in ("generate", "assemble", "eval"):
            codes.append(main([cmd, "-c", cfg, "--set", f"output_dir={out}"]))
        checksums.append(
            {cmd: json.loads((demo_dir / out / f"manifest_{cmd}.json").read_text())["artifacts"] for cmd in ("generate", "assemble", "eval")}
        )
    run = demo_dir / "run_a"
    region = parse_region((demo_dir / "demo_region.geojson").read_bytes())
    scene = parse_mesh((run / "scene.ply").read_bytes())
    rows = {r["building_id"]: r for r in json.loads((run / "buildings.json").read_text())}
    watertight, worst = True, 0.0
    for rec in region.buildings:
        part = scene.group(rec.id)
        watertight &= _oriented_closed(part.triangles)
        gx, gy = _upward_centroid(part)
        fx, fy = _footprint_centroid(rec)
        worst = max(worst, math.hypot(gx - fx, gy - fy) / rows[rec.id]["voxel_size"])
    same = checksums[0] == checksums[1]
    ok = all(c == 0 for c in codes) and len(region.buildings) == 5 and watertight and worst <= 0.5 and same
    detail = f"exit codes={codes}, watertight={watertight}, max centroid err={worst:.3f} voxel, checksums equal={same}"
    verdict(11, "end-to-end smoke", ok, detail)
