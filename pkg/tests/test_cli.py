import json

import numpy as np
import pytest
from PIL import Image

from tilegan.cli import main
from tilegan.cpgan import GanConfig, ProgressiveGAN, ProgressiveSchedule
from tilegan.wae import WaeConfig, build_wae, save_wae

SMALL = """\
seed: 3
synth: {n_scenes: 24, size: 32}
wae: {latent_dim: 8, epochs: 2, batch_size: 16, base_channels: 4, max_channels: 8}
gan: {resolutions: [8], images_per_step: 64, batch_sizes: 16, fmap_base: 64, fmap_max: 8}
evaluate: {k: [3], pairs_per_cell: 10}
grow: {rows: 3, cols: 3}
"""


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.yaml"
    cfg.write_text(SMALL)
    c = ["--config", str(cfg)]
    assert main(["synth", "--out", str(root / "synth"), *c]) == 0
    assert main(["train-wae", "--data", str(root / "synth"), "--out", str(root / "wae"), *c]) == 0
    assert main(["train-gan", "--data", str(root / "synth"), "--waes", str(root / "wae"),
                 "--out", str(root / "gan"), *c]) == 0
    return root, c


def _manifest(d):
    return json.loads((d / "run.json").read_text())


def test_pipeline_run_directories(runs):
    root, _ = runs
    synth, wae, gan = (_manifest(root / n) for n in ("synth", "wae", "gan"))
    assert (root / "synth" / "dataset" / "manifest.txt").is_file()
    assert set(wae["checkpoints"]) == {"wae_8px"}
    assert gan["inputs"]["wae_8px"]["checkpoint_id"] == wae["checkpoints"]["wae_8px"]
    assert (root / "gan" / gan["final_checkpoint"]).is_file()
    assert synth["config_hash"] == wae["config_hash"] and synth["seed"] == 3
    for rec in (root / "gan" / "gan_losses.jsonl").read_text().splitlines():
        assert all(np.isfinite(v) for k, v in json.loads(rec).items() if k.startswith("l_"))


def test_synth_is_reproducible(runs, tmp_path):
    root, c = runs
    assert main(["synth", "--out", str(tmp_path / "again"), *c]) == 0
    assert _manifest(tmp_path / "again")["outputs"] == _manifest(root / "synth")["outputs"]


def test_evaluate_prints_table_report(runs, tmp_path, capsys):
    root, c = runs
    code = main(["evaluate", "--data", str(root / "synth"), "--gan", str(root / "gan"),
                 "--waes", str(root / "wae"), "--out", str(tmp_path / "ev"), *c])
    assert code == 0
    out = capsys.readouterr().out
    assert "Real Data with 3 clusters" in out and "Fake Data with 3 clusters" in out
    for row in ("Real/Real", "Fake/Fake", "Real/Fake", "% images"):
        assert row in out
    assert (tmp_path / "ev" / "report_k3.jsonl").is_file()
    ev = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert 0 <= ev["reports"]["3"]["robustness_agreement"] <= 1 and "ks_distance" in ev["oracle"]


def test_grow_from_dataset(runs, tmp_path):
    root, c = runs
    assert main(["grow", "--gan", str(root / "gan"), "--waes", str(root / "wae"),
                 "--data", str(root / "synth"), "--out", str(tmp_path / "g"), "--feather", *c]) == 0
    img = np.asarray(Image.open(tmp_path / "g" / "scene.png"))
    assert img.shape == (24, 24)
    assert (tmp_path / "g" / "scene_feathered.png").is_file()
    seams = json.loads((tmp_path / "g" / "seams.json").read_text())
    assert seams  # reported


def test_grow_four_by_four_at_128(tmp_path):
    cfg = GanConfig(schedule=ProgressiveSchedule.from_resolutions([128]), latent_dim=8, noise_dim=8,
                    fmap_base=64, fmap_max=4)
    ProgressiveGAN(cfg).save(tmp_path / "gan.ckpt")
    save_wae(build_wae(WaeConfig(128, latent_dim=8, base_channels=2, max_channels=4)),
             tmp_path / "waes" / "wae_128px.ckpt")
    rng = np.random.default_rng(0)
    Image.fromarray(rng.integers(0, 256, (256, 256), dtype=np.uint8)).save(tmp_path / "seed.png")
    code = main(["grow", "--gan", str(tmp_path / "gan.ckpt"), "--waes", str(tmp_path / "waes"),
                 "--seed-image", str(tmp_path / "seed.png"), "--rows", "4", "--cols", "4",
                 "--out", str(tmp_path / "out")])
    assert code == 0
    assert np.asarray(Image.open(tmp_path / "out" / "scene.png")).shape == (512, 512)
    side = json.loads((tmp_path / "out" / "scene.json").read_text())
    assert sum(c["kind"] == "generated" for c in side["cells"]) == 13


def test_ingest_one_raster_gives_four_tiles(tmp_path, capsys):
    rng = np.random.default_rng(1)
    Image.fromarray(rng.integers(0, 256, (512, 512), dtype=np.uint8)).save(tmp_path / "r.png")
    out = tmp_path / "ds"
    assert main(["ingest", str(tmp_path / "r.png"), "--out", str(out)]) == 0
    assert len(list((out / "dataset" / "tiles").iterdir())) == 4
    # the idempotency guard refuses to overwrite, --force replaces
    assert main(["ingest", str(tmp_path / "r.png"), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["ingest", str(tmp_path / "r.png"), "--out", str(out), "--force"]) == 0


def test_force_never_deletes_foreign_directories(tmp_path):
    (tmp_path / "mine.txt").write_text("keep")
    assert main(["synth", "--n-scenes", "4", "--size", "32", "--out", str(tmp_path), "--force"]) == 2
    assert (tmp_path / "mine.txt").read_text() == "keep"


def test_empty_ingest_is_usage_error(tmp_path):
    assert main(["ingest", "--out", str(tmp_path / "x")]) == 1


def test_missing_prerequisite_names_producer(runs, tmp_path, capsys):
    root, c = runs
    code = main(["train-gan", "--data", str(root / "synth"), "--waes", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "g"), *c])
    assert code == 2
    err = capsys.readouterr().err
    assert "wae_8px.ckpt" in err and "tilegan train-wae" in err
    assert main(["train-wae", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "w")]) == 2
    assert "tilegan synth" in capsys.readouterr().err


def test_bad_config_key_is_input_error(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("synth: {scenes: 4}\n")
    assert main(["synth", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 1
    assert "scenes" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train-wae"]) == 1


def test_commands_leave_upstream_artifacts_alone(runs, tmp_path):
    from tilegan.pipeline import file_digest
    root, c = runs
    snapshot = lambda: {p: file_digest(p) for n in ("synth", "wae", "gan") for p in (root / n).rglob("*")
                        if p.is_file()}
    before = snapshot()
    main(["grow", "--gan", str(root / "gan"), "--waes", str(root / "wae"), "--data", str(root / "synth"),
          "--out", str(tmp_path / "g"), *c])
    main(["evaluate", "--data", str(root / "synth"), "--gan", str(root / "gan"), "--waes", str(root / "wae"),
          "--out", str(tmp_path / "e"), *c])
    assert snapshot() == before
    for n in ("synth", "wae", "gan"):
        outputs = _manifest(root / n)["outputs"]
        assert outputs == {str(p.relative_to(root / n)): d for p, d in before.items()
                           if p.is_relative_to(root / n) and p.name != "run.json"}
