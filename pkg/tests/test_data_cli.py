import json
import logging

import numpy as np
import pytest

from icm_codec.checkpoint import load_codec, save_codec
from icm_codec.cli import main
from icm_codec.codec_core import CodecConfig, build_codec
from icm_codec.data import (
    CropSampler,
    DatasetIndex,
    ingest_dataset,
    load_image,
    random_crop,
    save_image,
    synthetic_image,
    write_synthetic_dataset,
)
from icm_codec.errors import ConfigurationError, DatasetError
from icm_codec.training import RunConfig, smoothed, train_base


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    write_synthetic_dataset(root, 3, 64, 64, seed=0)
    return root


def test_ingest_skips_corrupt(dataset, caplog):
    (dataset / "broken.png").write_bytes(b"\x89PNG not really")
    with caplog.at_level(logging.WARNING):
        index = ingest_dataset(dataset)
    assert len(index) == 3
    assert index.skipped == ["broken.png"]
    assert sum("broken.png" in r.message for r in caplog.records) == 1


def test_ingest_empty_directory(tmp_path):
    with pytest.raises(DatasetError):
        ingest_dataset(tmp_path)


def test_ingest_hash_is_stable(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("ICM_CACHE_DIR", str(tmp_path / "cache"))
    a = ingest_dataset(dataset)
    b = ingest_dataset(dataset)
    assert a.index_hash() == b.index_hash()
    cached = list((tmp_path / "cache").glob("index_*.json"))
    assert len(cached) == 1
    assert DatasetIndex.load(cached[0]).index_hash() == a.index_hash()


def test_eligibility_recorded(tmp_path):
    save_image(tmp_path / "big.png", synthetic_image(64, 64, 0))
    save_image(tmp_path / "small.png", synthetic_image(32, 80, 1))
    index = ingest_dataset(tmp_path)
    assert index.eligibility(64) == {"crop": 64, "eligible": 1, "total": 2}
    assert [e["path"] for e in index.order(0, 1, 64)] == ["big.png"]


def test_random_crop_examples():
    img = np.arange(512 * 512 * 3, dtype=np.int64).reshape(512, 512, 3)
    assert np.array_equal(random_crop(img, 512, 0), img)
    tall = np.arange(513 * 512 * 3, dtype=np.int64).reshape(513, 512, 3)
    starts = {int(random_crop(tall, 512, s)[0, 0, 0]) // (512 * 3) for s in range(40)}
    assert starts == {0, 1}
    assert np.array_equal(random_crop(tall, 512, 7), random_crop(tall, 512, 7))
    with pytest.raises(ConfigurationError):
        random_crop(img, 513, 0)


def test_sampler_batches_are_seeded(dataset):
    sampler = CropSampler(ingest_dataset(dataset), 32)
    a = sampler.batch(0, 1, 0, 4)
    assert a.shape == (4, 3, 32, 32)
    assert (a == sampler.batch(0, 1, 0, 4)).all()
    assert not (a == sampler.batch(1, 1, 0, 4)).all()


def test_image_io_round_trip(tmp_path):
    img = synthetic_image(20, 30, 3)
    save_image(tmp_path / "x.png", img)
    assert np.array_equal(load_image(tmp_path / "x.png"), img)


def test_run_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(crop_size=72)
    with pytest.raises(ConfigurationError):
        RunConfig(checkpoints=-1)
    cfg = RunConfig.from_profile("paper")
    assert (cfg.crop_size, cfg.images_per_checkpoint, cfg.checkpoints, cfg.learning_rate) == (512, 6000, 200, 1e-4)
    assert cfg.steps_per_checkpoint == 1500
    assert RunConfig.from_profile("tiny", images_per_checkpoint=10).steps_per_checkpoint == 3


def test_train_without_checkpoints(tmp_path):
    images = [synthetic_image(64, 64, i) for i in range(2)]
    cfg = RunConfig.from_profile("tiny", checkpoints=0, seed=3)
    paths = train_base(cfg, images, out_dir=tmp_path)
    assert [p.name for p in paths] == ["ckpt_0000"]
    _, manifest = load_codec(paths[0])
    assert manifest["step"] == 0
    assert manifest["content_hash"] == save_codec(tmp_path / "ref", build_codec(CodecConfig.from_profile("tiny"), 3))["content_hash"]
    assert "discriminator" not in manifest
    assert not any(k.startswith("discriminator.") for k in manifest["entries"])


def test_train_is_seeded(tmp_path):
    images = [synthetic_image(64, 64, i) for i in range(2)]
    cfg = RunConfig.from_profile("tiny", checkpoints=1, images_per_checkpoint=8, crop_size=32)
    a = train_base(cfg, images, out_dir=tmp_path / "a")
    b = train_base(cfg, images, out_dir=tmp_path / "b")
    assert load_codec(a[0])[1]["content_hash"] == load_codec(b[0])[1]["content_hash"]
    log = json.loads((tmp_path / "a" / "train_log.json").read_text())
    assert len(log) == 2 and set(log[0]) >= {"total", "rate", "mse", "task"}


def test_smoothed_is_trailing_mean():
    assert smoothed([1, 2, 3, 4], window=2).tolist() == [1.0, 1.5, 2.5, 3.5]


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "ck"
    save_codec(path, build_codec(CodecConfig.from_profile("tiny"), seed=0))
    return path


def test_cli_encode_decode(tmp_path, checkpoint, capsys):
    img = synthetic_image(37, 45, 4)
    save_image(tmp_path / "in.png", img)
    assert main(["encode", "--checkpoint", str(checkpoint), "--input", str(tmp_path / "in.png"), "--out", str(tmp_path / "x.icmb")]) == 0
    assert (tmp_path / "x.icmb").read_bytes()[:4] == b"ICM1"
    assert main(["decode", "--checkpoint", str(checkpoint), "--input", str(tmp_path / "x.icmb"), "--out", str(tmp_path / "out.png")]) == 0
    assert load_image(tmp_path / "out.png").shape == img.shape
    out = capsys.readouterr().out.strip().splitlines()
    assert json.loads(out[-1])["height"] == 37


def test_cli_eval_two_images(tmp_path, checkpoint, dataset):
    (dataset / "img_0002.png").unlink()
    code = main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(tmp_path / "rep")])
    assert code == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert len(report["records"]) == 2
    assert (tmp_path / "rep" / "report.csv").exists()


def test_cli_compare_three_panels(tmp_path, checkpoint, dataset):
    other = tmp_path / "ck2"
    save_codec(other, build_codec(CodecConfig.from_profile("tiny"), seed=1))
    args = ["compare", "--dataset", str(dataset), "--out", str(tmp_path / "cmp")]
    for c in (checkpoint, other, checkpoint):
        args += ["--checkpoint", str(c)]
    assert main(args) == 0
    meta = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert meta["panels"] == [str(checkpoint), str(other), str(checkpoint)]
    assert len(meta["grids"]) == 3
    grid = load_image(meta["grids"][0]["grid"])
    size = meta["grids"][0]["region"][2]
    assert grid.shape == (4 * size, 3 * 4 * size + 8, 3)


def test_cli_errors_are_machine_readable(tmp_path, capsys):
    assert main(["encode", "--checkpoint", str(tmp_path / "missing"), "--input", "x.png", "--out", "y"]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "encode" and err["error"]
    assert main(["ingest"]) == 1
    assert "--dataset" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]


def test_cli_flags_override_config(tmp_path, dataset, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(tmp_path / "nowhere"), "seed": 5}))
    assert main(["ingest", "--config", str(cfg)]) == 1
    capsys.readouterr()
    assert main(["ingest", "--config", str(cfg), "--dataset", str(dataset)]) == 0
    assert json.loads(capsys.readouterr().out)["images"] == 3


def test_cli_li_conflicts_with_explicit_rate(tmp_path, checkpoint, dataset, capsys):
    code = main(["finetune", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(tmp_path / "ft"), "--li", "--lr", "1e-3"])
    assert code == 1
    assert "ConfigurationError" in capsys.readouterr().err
