"""End-to-end stages: ingest, priors, training, generation, assembly, evaluation.

Every stage writes its artifacts under the configured output directory and
records them, with sha256 checksums, in ``manifest_<stage>.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, FORMAT_VERSIONS
from .cluster import build_features, hdbscan
from .config import ConfigError, PipelineConfig
from .embeddings import load as load_embeddings
from .errors import CityForgeError, EmptyMeshError
from .flow.conditions import featurize_image, render_front, render_top
from .flow.io import checkpoint_bytes, load_into, loss_trace_csv
from .flow.model import FlowConfig, FlowModel
from .flow.sampling import sample
from .flow.training import Schedule, TrainingExample, train
from .geo import Region, parse_region
from .latent import (
    ChannelStats,
    Latent,
    cosine_interpolate,
    decode_surrogate,
    encode_surrogate,
    fit_channel_stats,
    latent_denorm,
    latent_norm,
    sample_noise,
)
from .metrics import (
    MetricReport,
    chamfer,
    clip_score,
    default_tau,
    fscore,
    iou_top,
    pairwise_cos,
    regional_score,
    sample_points,
    summary_csv,
)
from .promptgen import bundled_library, dedup, enumerate_prompts, load_library, to_jsonl
from .scene import (
    Mesh,
    PlacedAsset,
    export_mesh,
    footprint_centroid,
    is_watertight,
    merge_scene,
    parse_mesh,
    place_building,
    placed_footprint_mask,
    scene_manifest,
    voxels_to_mesh,
)
from .voxels import GridSpec, VoxelGrid, building_frame, extrude_lod0, extrude_lod1, fill_pinches, rasterize_footprint

log = logging.getLogger(__name__)

RENDER_SIZE = 16
RENDER_PATCH = 4


@dataclass
class Workspace:
    root: Path
    artifacts: dict[str, str] = field(default_factory=dict)

    def write(self, rel: str, data: bytes | str) -> Path:
        raw = data.encode("utf-8") if isinstance(data, str) else data
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
        self.artifacts[rel] = hashlib.sha256(raw).hexdigest()
        return path

    def read(self, rel: str, stage: str) -> bytes:
        path = self.root / rel
        if not path.is_file():
            raise CityForgeError(f"missing {rel}; run '{stage}' first")
        return path.read_bytes()

    def manifest(self, command: str, cfg: PipelineConfig, seeds: dict) -> Path:
        doc = {
            "command": command,
            "version": __version__,
            "formats": FORMAT_VERSIONS,
            "config_sha256": cfg.digest(),
            "seeds": seeds,
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        path = self.root / f"manifest_{command}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8")
        return path


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def load_region(cfg: PipelineConfig) -> Region:
    path = cfg.path(cfg.region)
    if path is None:
        raise ConfigError("region", "required for this command")
    return parse_region(path.read_bytes(), name=cfg.region_name)


@dataclass
class BuildingPrior:
    building_id: str
    frame: GridSpec
    lod0: VoxelGrid
    lod1: VoxelGrid

    def grid(self, lod: int) -> VoxelGrid:
        return self.lod0 if lod == 0 else self.lod1


def build_priors(cfg: PipelineConfig, region: Region, jobs: int = 1) -> list[BuildingPrior]:
    def one(record):
        frame = building_frame(record, cfg.grid.resolution, cfg.grid.padding)
        return BuildingPrior(record.id, frame, extrude_lod0(record, frame), extrude_lod1(record, frame))

    return _map(one, region.buildings, jobs)


def encode_priors(cfg: PipelineConfig, priors: list[BuildingPrior]) -> tuple[dict, ChannelStats]:
    """Latents keyed by (building id, lod) plus channel stats fitted over all of them."""
    lat = cfg.latent
    latents = {
        (p.building_id, lod): encode_surrogate(p.grid(lod), lat.channels, lat.seed, lat.resolution)
        for p in priors
        for lod in (0, 1)
    }
    return latents, fit_channel_stats(list(latents.values()))


def conditions(cfg: PipelineConfig, prior: BuildingPrior) -> tuple[np.ndarray, np.ndarray]:
    """Top and frontal condition tokens rendered from the LOD1 prior."""
    d = cfg.model.d_cond
    top = featurize_image(render_top(prior.lod1, RENDER_SIZE), RENDER_PATCH, cfg.model.seed, d, "top")
    front = featurize_image(render_front(prior.lod1, RENDER_SIZE), RENDER_PATCH, cfg.model.seed + 1, d, "frontal")
    return top.tokens, front.tokens


def flow_config(cfg: PipelineConfig) -> FlowConfig:
    m = cfg.model
    return FlowConfig(
        channels=cfg.latent.channels,
        resolution=cfg.latent.resolution,
        d_model=m.d_model,
        heads=m.heads,
        blocks=m.blocks,
        d_cond=m.d_cond,
    )


def _seeds(cfg: PipelineConfig) -> dict:
    return {
        "latent": cfg.latent.seed,
        "model": cfg.model.seed,
        "training": cfg.training.seed,
        "sampling": cfg.sampling.seed,
        "metrics": cfg.metrics.seed,
    }


def _write_priors(ws: Workspace, priors, latents, stats) -> None:
    for p in priors:
        for lod in (0, 1):
            ws.write(f"priors/{p.building_id}.lod{lod}.uvox", p.grid(lod).to_bytes())
            ws.write(f"priors/{p.building_id}.lod{lod}.ulat", latents[p.building_id, lod].to_bytes())
    ws.write("priors/stats.json", stats.to_json())


# --- stages ---------------------------------------------------------------


def run_ingest(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    region = load_region(cfg)
    ws.write("region.json", region.dumps())
    ws.write("ingest_report.txt", "".join(line + "\n" for line in region.report))
    ws.manifest("ingest", cfg, _seeds(cfg))
    return ws


def run_prior(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    priors = build_priors(cfg, load_region(cfg), jobs)
    latents, stats = encode_priors(cfg, priors)
    _write_priors(ws, priors, latents, stats)
    ws.manifest("prior", cfg, _seeds(cfg))
    return ws


def training_set(cfg: PipelineConfig, priors, latents, stats) -> list[TrainingExample]:
    """Desk-scale targets: each building's own LOD1 latent, with both LOD priors."""
    out = []
    for p in priors:
        norm = {lod: latent_norm(latents[p.building_id, lod], stats).tokens() for lod in (0, 1)}
        c_t, c_f = conditions(cfg, p)
        out.append(TrainingExample(norm[1], c_t, c_f, norm))
    return out


def train_model(cfg: PipelineConfig, priors, latents, stats, ws: Workspace) -> FlowModel:
    torch.manual_seed(cfg.training.seed)
    model = FlowModel.from_seed(flow_config(cfg), cfg.model.seed)
    t = cfg.training
    schedule = Schedule(
        steps=t.steps,
        batch_size=t.batch_size,
        lr=t.lr,
        momentum=t.momentum,
        seed=t.seed,
        lambdas=tuple(float(x) for x in t.lambdas),
        lods=tuple(int(x) for x in t.lods),
    )
    result = train(model, training_set(cfg, priors, latents, stats), schedule)
    ws.write("model.uflw", checkpoint_bytes(result.model))
    ws.write("loss.csv", loss_trace_csv(result.losses))
    return result.model


def run_train(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    priors = build_priors(cfg, load_region(cfg), jobs)
    latents, stats = encode_priors(cfg, priors)
    _write_priors(ws, priors, latents, stats)
    train_model(cfg, priors, latents, stats, ws)
    ws.manifest("train", cfg, _seeds(cfg))
    return ws


def _load_or_train(cfg, priors, latents, stats, ws) -> FlowModel:
    path = cfg.path(cfg.checkpoint) or ws.root / "model.uflw"
    if path.is_file():
        model = FlowModel(flow_config(cfg))
        load_into(model, path.read_bytes())
        model.eval()
        return model
    log.info("no checkpoint at %s; training one", path)
    return train_model(cfg, priors, latents, stats, ws)


def noise_seed(base: int, index: int) -> int:
    return base * 1_000_003 + index


def run_generate(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    """Prior -> normalized latent -> blend with noise -> flow sampling, per building."""
    ws = Workspace(cfg.out)
    priors = build_priors(cfg, load_region(cfg), jobs)
    latents, stats = encode_priors(cfg, priors)
    _write_priors(ws, priors, latents, stats)
    model = _load_or_train(cfg, priors, latents, stats, ws)
    dtype = next(model.parameters()).dtype
    m, c = cfg.latent.resolution, cfg.latent.channels
    for i, p in enumerate(priors):
        prior = latent_norm(latents[p.building_id, cfg.prior.lod], stats)
        eps = sample_noise((m, c), noise_seed(cfg.sampling.seed, i))
        init = cosine_interpolate(prior, eps, cfg.prior.lam)
        c_t, c_f = conditions(cfg, p)
        as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
        out = sample(model, as_t(init.tokens())[None], as_t(c_t), as_t(c_f), cfg.sampling.steps, cfg.sampling.solver)
        z = latent_denorm(Latent.from_tokens(out[0].double().numpy(), m), stats)
        ws.write(f"generated/{p.building_id}.ulat", z.to_bytes())
    ws.manifest("generate", cfg, _seeds(cfg))
    return ws


def decode_asset(cfg: PipelineConfig, z: Latent, frame: GridSpec) -> VoxelGrid:
    factor = cfg.grid.resolution // cfg.latent.resolution
    return fill_pinches(decode_surrogate(z, cfg.latent.seed, frame.coarsened(factor)))


def run_assemble(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    region = load_region(cfg)

    def one(record):
        frame = building_frame(record, cfg.grid.resolution, cfg.grid.padding)
        z = Latent.from_bytes(ws.read(f"generated/{record.id}.ulat", "generate"))
        asset = decode_asset(cfg, z, frame)
        if not asset.occupancy.any():
            raise EmptyMeshError(f"generated asset for building {record.id!r} decoded to an empty grid")
        placed, mesh = place_building(asset, record, region.bounds, frame)
        return record.id, asset, placed, mesh

    results = _map(one, region.buildings, jobs)
    for rid, asset, _, _ in results:
        ws.write(f"assets/{rid}.uvox", asset.to_bytes())
    parts = [(placed, mesh) for _, _, placed, mesh in results]
    scene = merge_scene(parts)
    ws.write("scene.obj", export_mesh(scene, "obj"))
    ws.write("scene.ply", export_mesh(scene, "ply"))
    ws.write("scene.json", scene_manifest(parts))
    ws.manifest("assemble", cfg, _seeds(cfg))
    return ws


def reference_scene(cfg: PipelineConfig, region: Region) -> Mesh:
    """LOD1 extrusions meshed in place; they already live in the region frame."""
    parts = []
    for record in region.buildings:
        frame = building_frame(record, cfg.grid.resolution, cfg.grid.padding)
        mesh = voxels_to_mesh(fill_pinches(extrude_lod1(record, frame)), record.id)
        parts.append((PlacedAsset(record.id, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), frame.resolution), mesh))
    return merge_scene(parts)


def _geometry(report: MetricReport, gen: Mesh, ref: Mesh, cfg: PipelineConfig) -> None:
    mc = cfg.metrics
    a = sample_points(gen, mc.points, mc.seed)
    # common seed: identical meshes yield identical clouds
    b = sample_points(ref, mc.points, mc.seed)
    report.tau = mc.tau if mc.tau is not None else default_tau(b)
    report.cd = chamfer(a, b)
    report.fscore = fscore(a, b, report.tau)
    report.seeds.update({"generated_points": mc.seed, "reference_points": mc.seed})
    report.counts.update({"generated_points": len(a), "reference_points": len(b)})


def _embedding_scores(report: MetricReport, cfg: PipelineConfig) -> None:
    gen_path, ref_path = cfg.path(cfg.embeddings), cfg.path(cfg.reference_embeddings)
    if gen_path is None:
        return
    gen = load_embeddings(gen_path.read_bytes())
    report.clip_pairwise = pairwise_cos(gen)
    if ref_path is not None:
        report.clip_score = clip_score(gen, load_embeddings(ref_path.read_bytes()))


def run_eval(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    mc = cfg.metrics
    if mc.generated_mesh or mc.reference_mesh:
        if not (mc.generated_mesh and mc.reference_mesh):
            raise ConfigError("metrics.reference_mesh", "set both generated_mesh and reference_mesh, or neither")
        gen = parse_mesh(cfg.path(mc.generated_mesh).read_bytes())
        ref = parse_mesh(cfg.path(mc.reference_mesh).read_bytes())
        report = MetricReport(region=Path(mc.generated_mesh).stem)
        _geometry(report, gen, ref, cfg)
        _embedding_scores(report, cfg)
    else:
        region = load_region(cfg)
        gen = parse_mesh(ws.read("scene.ply", "assemble"))
        report = MetricReport(region=region.name)
        _geometry(report, gen, reference_scene(cfg, region), cfg)
        placements = json.loads(ws.read("scene.json", "assemble"))["buildings"]
        rows = []
        for record in region.buildings:
            frame = building_frame(record, cfg.grid.resolution, cfg.grid.padding)
            asset = VoxelGrid.from_bytes(ws.read(f"assets/{record.id}.uvox", "assemble"))
            pa = placements[record.id]
            placed = PlacedAsset(record.id, tuple(pa["scale"]), tuple(pa["translation"]), tuple(pa["anchor"]), pa["source_resolution"])
            gen_mask = placed_footprint_mask(asset, placed, frame, mc.mask_resolution)
            iou = iou_top(gen_mask, rasterize_footprint(record, frame, mc.mask_resolution))
            part = gen.group(record.id)
            cx, cy = footprint_centroid(part)
            rows.append(
                {
                    "building_id": record.id,
                    "iou_top": iou,
                    "centroid_error": float(np.hypot(cx - record.centroid[0], cy - record.centroid[1])),
                    "voxel_size": asset.cell_size * placed.scale[0],
                    "watertight": is_watertight(part),
                }
            )
        report.iou_top = float(np.mean([r["iou_top"] for r in rows]))
        report.counts["buildings"] = len(rows)
        ws.write("buildings.json", json.dumps(rows, indent=2, sort_keys=True))
        _embedding_scores(report, cfg)
    if report.iou_top is not None and report.clip_pairwise is not None:
        report.s_regional = regional_score(report.iou_top, min(1.0, max(-1.0, report.clip_pairwise)))
    ws.write("metrics.json", report.to_json())
    ws.write("metrics.csv", summary_csv([report]))
    ws.manifest("eval", cfg, _seeds(cfg))
    return ws


def run_cluster(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    path = cfg.path(cfg.embeddings)
    if path is None:
        raise ConfigError("embeddings", "required for the cluster command")
    region = load_region(cfg)
    emb = load_embeddings(path.read_bytes())
    heights = {b.id: b.height for b in region.buildings}
    cc = cfg.cluster
    feats = build_features(emb, heights, cc.height_scale, cc.standardize)
    labels = hdbscan(feats, cc.min_cluster_size, cc.min_samples, cc.method, cc.allow_single_cluster)
    ws.write("clusters.csv", labels.to_csv())
    ws.manifest("cluster", cfg, _seeds(cfg))
    return ws


def run_prompts(cfg: PipelineConfig, jobs: int = 1) -> Workspace:
    ws = Workspace(cfg.out)
    path = cfg.path(cfg.prompts.library)
    lib = bundled_library() if path is None else load_library(path.read_text("utf-8"))
    ws.write("prompts.jsonl", to_jsonl(dedup(enumerate_prompts(lib))))
    ws.manifest("prompts", cfg, _seeds(cfg))
    return ws


STAGES = {
    "ingest": run_ingest,
    "prior": run_prior,
    "train": run_train,
    "generate": run_generate,
    "assemble": run_assemble,
    "eval": run_eval,
    "cluster": run_cluster,
    "prompts": run_prompts,
}
