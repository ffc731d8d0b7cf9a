from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from cityforge import pipeline
from cityforge.cli import main
from cityforge.config import ConfigError, PipelineConfig, load_config, load_config_file
from cityforge.embeddings import EmbeddingSet, write_csv
from cityforge.latent import Latent
from cityforge.scene import export_mesh, voxels_to_mesh
from cityforge.voxels import GridSpec, VoxelGrid

FAST = ["--set", "training.steps=5", "--set", "sampling.steps=2", "--set", "metrics.points=2000"]


def write_config(directory: Path, doc: dict, name: str = "cfg.json") -> Path:
    path = directory / name
    path.write_text(json.dumps(doc), "utf-8")
    return path


# --- config --------------------------------------------------------------


def test_defaults_and_overrides():
    cfg = load_config({}, overrides=["training.steps=7", "sampling.solver=heun", "prior.lam=0.25"])
    assert isinstance(cfg, PipelineConfig)
    assert cfg.training.steps == 7 and cfg.sampling.solver == "heun" and cfg.prior.lam == 0.25


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"grid": {"resolution": "big"}}, "grid.resolution"),
        ({"grid": {"resolution": 30}}, "latent.resolution"),
        ({"prior": {"lam": 1.5}}, "prior.lam"),
        ({"training": {"lambdas": [0.2, 2.0]}}, "training.lambdas[1]"),
        ({"sampling": {"solver": "rk4"}}, "sampling.solver"),
        ({"model": {"d_model": 30, "heads": 4}}, "model.heads"),
        ({"bogus": 1}, "bogus"),
        ({"region": "missing.geojson"}, "region"),
    ],
)
def test_config_field_paths(doc, path, tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(doc, tmp_path)
    assert info.value.path == path
    assert str(info.value).startswith(path + ": ")


def test_config_digest_stable():
    a, b = load_config({"training": {"steps": 3}}), load_config({"training": {"steps": 3}})
    assert a.digest() == b.digest() != load_config({"training": {"steps": 4}}).digest()


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(bad)


# --- exit codes ----------------------------------------------------------


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == "cityforge 0.1.0 (formats: UVOX 1, ULAT 1, UFLW 1, UEMB 1)"


def test_config_error_exit_2(demo_dir, capsys):
    code = main(["generate", "-c", str(demo_dir / "demo_config.json"), "--set", "sampling.steps=0"])
    assert code == 2
    assert "sampling.steps" in capsys.readouterr().err


def test_runtime_error_exit_1(demo_dir, capsys):
    # assemble before generate: the generated latents are missing
    code = main(["assemble", "-c", str(demo_dir / "demo_config.json")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error [") and "generate" in err


def test_bad_region_exit_1(tmp_path, capsys):
    (tmp_path / "r.geojson").write_text('{"type": "FeatureCollection", "features": []}')
    cfg = write_config(tmp_path, {"region": "r.geojson"})
    assert main(["ingest", "-c", str(cfg)]) == 1
    assert "error [geo]" in capsys.readouterr().err


# --- subcommands ---------------------------------------------------------


def test_ingest_and_prior(demo_dir):
    cfg = str(demo_dir / "demo_config.json")
    assert main(["ingest", "-c", cfg]) == 0
    region = json.loads((demo_dir / "out" / "region.json").read_text())
    assert len(region["buildings"]) == 5
    assert main(["prior", "-c", cfg, "-j", "2"]) == 0
    grid = VoxelGrid.from_bytes((demo_dir / "out" / "priors" / "tower.lod1.uvox").read_bytes())
    assert grid.occupancy.shape == (32, 32, 32) and grid.occupancy.any()
    assert Latent.from_bytes((demo_dir / "out" / "priors" / "tower.lod1.ulat").read_bytes()).values.shape == (8, 8, 8, 8)


def test_eval_identical_meshes(tmp_path):
    occ = np.zeros((4, 4, 4), bool)
    occ[1:3, 1:3, 0:3] = True
    mesh = voxels_to_mesh(VoxelGrid(GridSpec(4, 1.0), occ), "m")
    (tmp_path / "a.ply").write_bytes(export_mesh(mesh, "ply"))
    (tmp_path / "b.obj").write_bytes(export_mesh(mesh, "obj"))
    cfg = write_config(tmp_path, {"metrics": {"generated_mesh": "a.ply", "reference_mesh": "b.obj", "points": 3000}})
    assert main(["eval", "-c", str(cfg)]) == 0
    report = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert report["cd"] == 0.0 and report["fscore"] == 1.0


def test_prompts_demo_library(tmp_path):
    from importlib import resources

    lib = resources.files("cityforge.data").joinpath("demo_library.json").read_text("utf-8")
    (tmp_path / "lib.json").write_text(lib)
    cfg = write_config(tmp_path, {"prompts": {"library": "lib.json"}})
    assert main(["prompts", "-c", str(cfg)]) == 0
    lines = (tmp_path / "out" / "prompts.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert all("glass curtain wall" not in json.loads(l)["prompt"] or "industrial" not in json.loads(l)["prompt"] for l in lines)


def test_cluster_command(demo_dir):
    ids = ["block_a", "block_b", "courtyard", "tower", "hall"]
    vecs = np.array([[0, 0], [0.1, 0], [0, 0.1], [5, 5], [5.1, 5]], float)
    (demo_dir / "emb.csv").write_text(write_csv(EmbeddingSet(tuple(ids), vecs)))
    cfg = str(demo_dir / "demo_config.json")
    code = main(["cluster", "-c", cfg, "--set", "embeddings=emb.csv", "--set", "cluster.height_scale=0.0", "--set", "cluster.min_samples=1"])
    assert code == 0
    rows = (demo_dir / "out" / "clusters.csv").read_text().splitlines()[1:]
    labels = {r.split(",")[0]: int(r.split(",")[1]) for r in rows}
    assert labels["block_a"] == labels["block_b"] == labels["courtyard"] != labels["tower"] == labels["hall"]


def test_cluster_needs_embeddings(demo_dir):
    assert main(["cluster", "-c", str(demo_dir / "demo_config.json")]) == 2


def test_generate_deterministic_with_manifest(demo_dir):
    cfg = str(demo_dir / "demo_config.json")
    runs = []
    for out in ("run1", "run2"):
        assert main(["generate", "-c", cfg, *FAST, "--set", f"output_dir={out}"]) == 0
        runs.append(demo_dir / out)
    for bid in ("block_a", "tower", "hall"):
        a = (runs[0] / "generated" / f"{bid}.ulat").read_bytes()
        b = (runs[1] / "generated" / f"{bid}.ulat").read_bytes()
        assert a == b
    m1 = json.loads((runs[0] / "manifest_generate.json").read_text())
    m2 = json.loads((runs[1] / "manifest_generate.json").read_text())
    assert m1["artifacts"] == m2["artifacts"]
    assert m1["config_sha256"] != m2["config_sha256"]  # output_dir differs
    assert {"command", "version", "formats", "seeds"} <= set(m1)
    assert "model.uflw" in m1["artifacts"]


def test_pipeline_stages_reuse_checkpoint(demo_dir):
    cfg = load_config_file(demo_dir / "demo_config.json", FAST[1::2])
    ws = pipeline.STAGES["train"](cfg, jobs=1)
    assert "model.uflw" in ws.artifacts and "loss.csv" in ws.artifacts
    gen = pipeline.STAGES["generate"](cfg, jobs=2)
    # an existing checkpoint is loaded rather than retrained
    assert "model.uflw" not in gen.artifacts
    assert sum(k.startswith("generated/") for k in gen.artifacts) == 5
