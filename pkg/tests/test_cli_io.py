import json
import os

import numpy as np
import pytest

from viptr import cli
from viptr.backbone import build_model
from viptr.checkpoint import (BLOB, MANIFEST, CorruptCheckpoint, load_checkpoint, read_manifest,
                              save_checkpoint)
from viptr.config import ConfigError, load_run_config, parse_run_config
from viptr.ctc import Alphabet
from viptr.imageio import (ImageFormatError, load_image, preprocess, read_pnm, write_pgm,
                           write_ppm, write_raw)
from viptr.tensor import no_grad

from conftest import toy_config


@pytest.fixture
def ckpt(tmp_path):
    model = build_model(toy_config(), seed=3)
    path = str(tmp_path / "ck")
    save_checkpoint(model, path, Alphabet.from_string("0123456789"))
    return model, path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def kv(out):
    return dict(line.split("=", 1) for line in out.strip().splitlines())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(ckpt):
    model, path = ckpt
    loaded = load_checkpoint(path)
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(loaded.model.state_dict()[name], arr)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 3, 32, 64)).astype(np.float32)
    model.eval()
    with no_grad():
        np.testing.assert_array_equal(model.logits(x).data, loaded.model.logits(x).data)
    assert loaded.config == model.cfg and loaded.alphabet.symbols == tuple("0123456789")


def test_manifest_layout(ckpt):
    model, path = ckpt
    config, entries = read_manifest(path)
    names = [e.name for e in entries]
    assert names == sorted(names)
    assert sum(e.kind == "param" for e in entries) == len(list(model.named_parameters()))
    offset = 0
    for e in entries:
        assert e.offset == offset and e.length == 4 * int(np.prod(e.shape))
        offset += e.length
    assert os.path.getsize(os.path.join(path, BLOB)) == offset
    # fixed little-endian float32 regardless of platform
    first = entries[0]
    raw = open(os.path.join(path, BLOB), "rb").read()[first.offset:first.offset + first.length]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(first.shape),
                                  model.state_dict()[first.name])


def test_truncated_blob_names_first_bad_tensor(ckpt):
    _, path = ckpt
    _, entries = read_manifest(path)
    blob = os.path.join(path, BLOB)
    cut = entries[5].offset + 2
    with open(blob, "r+b") as f:
        f.truncate(cut)
    with pytest.raises(CorruptCheckpoint, match=entries[5].name.replace(".", r"\.")):
        load_checkpoint(path)


def test_flipped_byte_fails_checksum(ckpt):
    _, path = ckpt
    _, entries = read_manifest(path)
    blob = os.path.join(path, BLOB)
    data = bytearray(open(blob, "rb").read())
    data[entries[3].offset + 1] ^= 0xFF
    open(blob, "wb").write(bytes(data))
    with pytest.raises(CorruptCheckpoint, match="checksum"):
        load_checkpoint(path)


def test_manifest_shape_mismatch_detected(ckpt):
    _, path = ckpt
    mpath = os.path.join(path, MANIFEST)
    text = open(mpath).read().replace('"channels": [16, 16, 32, 16]', '"channels": [32, 16, 32, 16]')
    open(mpath, "w").write(text)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "nope"))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def test_ppm_downscale(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (64, 192, 3))
    write_ppm(tmp_path / "a.ppm", rgb)
    x = load_image(tmp_path / "a.ppm")
    assert x.shape == (3, 32, 96) and x.dtype == np.float32
    assert x.min() >= -1 and x.max() <= 1


def test_odd_width_is_replicate_padded(tmp_path):
    g = np.tile(np.arange(95, dtype=np.uint8), (32, 1))
    write_pgm(tmp_path / "b.pgm", g)
    x = load_image(tmp_path / "b.pgm")
    assert x.shape == (3, 32, 96)
    np.testing.assert_array_equal(x[:, :, 95], x[:, :, 94])
    np.testing.assert_array_equal(x[0], x[1])


def test_white_image_maps_to_plus_one(tmp_path):
    write_pgm(tmp_path / "w.pgm", np.full((40, 123), 255))
    x = load_image(tmp_path / "w.pgm")
    assert x.shape == (3, 32, 100) and np.all(x == 1.0)


def test_pgm_with_comment_and_16bit():
    data = b"P5\n# made by hand\n2 1\n65535\n" + np.array([0, 65535], ">u2").tobytes()
    np.testing.assert_array_equal(read_pnm(data)[..., 0], [[0.0, 1.0]])


def test_raw_dump_round_trip(tmp_path):
    chw = np.random.default_rng(1).uniform(0, 1, (1, 32, 48))
    write_raw(tmp_path / "r.raw", chw)
    x = load_image(tmp_path / "r.raw")
    np.testing.assert_allclose(x[0], chw[0].astype(np.float32) * 2 - 1, atol=1e-6)


@pytest.mark.parametrize("data", [b"P3\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P6\nx 1\n255\n",
                                  b"VPTRRAW1\x02\x00\x00\x00", b""])
def test_corrupt_images_rejected(tmp_path, data):
    p = tmp_path / "bad.img"
    p.write_bytes(data)
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_preprocess_keeps_aspect():
    assert preprocess(np.zeros((16, 30))).shape == (3, 32, 60)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def test_run_config_defaults_and_variant():
    rc = parse_run_config({"variant": "sviptr-v2-t"}, env={})
    assert rc.model.channels == [64, 128, 256, 192] and rc.model.num_classes == 11
    assert rc.seed == 0 and rc.hyper.weight_decay == 0.05 and rc.options.batch_size == 32


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="colour"):
        parse_run_config({"variant": "sviptr-v2-t", "colour": 1}, env={})
    with pytest.raises(ConfigError, match="momentum"):
        parse_run_config({"variant": "sviptr-v2-t", "optimizer": {"momentum": 0.9}}, env={})
    with pytest.raises(ConfigError):
        parse_run_config({"channels": [8, 8, 8, 8]}, env={})


def test_seed_env_override(tmp_path):
    (tmp_path / "alpha.txt").write_text("a\nb\nc\n")
    doc = {"channels": [16, 16, 32, 16], "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2],
           "permutation": "[L1][L1//G2][G1]", "seed": 3, "alphabet_path": "alpha.txt"}
    (tmp_path / "run.json").write_text(json.dumps(doc))
    assert load_run_config(tmp_path / "run.json", env={}).seed == 3
    rc = load_run_config(tmp_path / "run.json", env={"VIPTR_SEED": "17"})
    assert rc.seed == 17 and rc.alphabet.size == 4 and rc.model.num_classes == 4
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "run.json", env={"VIPTR_SEED": "abc"})


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_count(capsys):
    code, out, _ = run(capsys, "count", "--variant", "sviptr-v1-t")
    assert code == 0
    d = kv(out)
    assert abs(int(d["backbone_params"]) / 4.0e6 - 1) <= 0.05
    assert int(d["full_params"]) > int(d["backbone_params"])


def test_cli_flops(capsys):
    code, out, _ = run(capsys, "flops", "--variant", "sviptr-v2-t", "--width", "96")
    d = kv(out)
    assert code == 0 and abs(float(d["total_gflops"]) / 0.19 - 1) <= 0.2
    stages = sum(int(v) for k, v in d.items() if k.startswith("stage."))
    assert stages == int(d["total_macs"])


@pytest.mark.parametrize("argv", [[], ["count"], ["count", "--variant", "x"], ["flops", "--variant",
                                  "sviptr-v1-t", "--width", "95"], ["bench", "--iters", "0"], ["nope"]])
def test_cli_usage_errors_exit_2(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 2 and out == "" and err


def test_cli_runtime_error_exit_1(capsys, tmp_path):
    code, out, err = run(capsys, "infer", "--ckpt", str(tmp_path / "missing"), "--image", "x.pgm")
    assert code == 1 and out == "" and "error" in err


def test_cli_infer_untrained(capsys, ckpt, tmp_path):
    _, path = ckpt
    write_pgm(tmp_path / "t.pgm", np.random.default_rng(0).integers(0, 256, (32, 96)))
    code, out, _ = run(capsys, "infer", "--ckpt", path, "--image", str(tmp_path / "t.pgm"))
    assert code == 0 and out.endswith("\n")
    assert set(out.strip()) <= set("0123456789")


def test_cli_dump_attn(capsys, ckpt, tmp_path):
    model, path = ckpt
    write_pgm(tmp_path / "t.pgm", np.random.default_rng(0).integers(0, 256, (32, 64)))
    out_dir = tmp_path / "maps"
    code, out, _ = run(capsys, "dump-attn", "--ckpt", path, "--image", str(tmp_path / "t.pgm"),
                       "--out", str(out_dir))
    assert code == 0
    files = sorted(os.listdir(out_dir))
    assert int(kv(out)["maps"]) == len(files) > 0
    grids = {"stage1": (8, 16), "stage2": (4, 16), "stage3": (2, 16), "stage4": (1, 16)}
    for f in files:
        img = read_pnm(open(out_dir / f, "rb").read())[..., 0] * 255
        assert img.shape == grids[f.split(".")[0]], f
        assert img.min() == 0 and (img.max() == 255 or img.max() == 0)
    # every attention module of every block appears, each with its heads
    stems = {f.rsplit(".head", 1)[0] for f in files}
    assert {"stage2.0.local", "stage2.0.glob", "stage4.0.mixer"} <= stems


def test_cli_bench_single_variant(capsys):
    code, out, _ = run(capsys, "bench", "--variant", "sviptr-v2-t", "--iters", "1")
    d = kv(out)
    assert code == 0 and d["ordering"] == "sviptr-v2-t" and d["sviptr-v2-t.iters"] == "1"
    assert float(d["sviptr-v2-t.mean_ms_per_image"]) > 0
    assert d["sviptr-v2-t.std_ms_per_image"] == "0.0000"


def test_cli_train(capsys, tmp_path):
    doc = {"channels": [16, 16, 32, 16], "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2],
           "permutation": "[L2][L2G1][G2]", "ffn_ratio": 2.0,
           "optimizer": {"total_epochs": 2, "warmup_epochs": 0},
           "data": {"n_train": 8, "n_eval": 4}, "train": {"batch_size": 4}}
    (tmp_path / "run.json").write_text(json.dumps(doc))
    code, out, err = run(capsys, "train", "--config", str(tmp_path / "run.json"))
    assert code == 0, err
    d = kv(out)
    assert d["epochs"] == "2"
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 2
    assert os.path.exists(tmp_path / "checkpoint" / MANIFEST)
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "missing.json"))
    assert code == 1
