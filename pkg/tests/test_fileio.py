"""Tests for image files, packed datasets, checkpoints, and config text."""
import hashlib
import os

import numpy as np
import pytest

from pixattn.blocks import Scheme
from pixattn.fileio import (ConfigError, FileFormatError, box_downsample,
                            load_checkpoint, load_dataset, model_config_to_text,
                            pack_dataset, parse_config, parse_model_config,
                            read_pgm, read_ppm, save_checkpoint, write_dataset,
                            write_pgm, write_ppm)
from pixattn.imagerep import Image
from pixattn.model import ModelConfig, build, from_params
from pixattn.rng import Rng

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def random_image(rng, h=8, w=8):
    return Image(rng.integers(0, 256, (h, w, 3)))


# ---------------------------------------------------------------------------
# PPM


def test_ppm_round_trip(tmp_path):
    for seed in range(5):
        img = random_image(Rng(seed))
        path = tmp_path / f"img{seed}.ppm"
        write_ppm(path, img)
        assert read_ppm(path) == img


def test_ppm_one_by_one_white_bytes(tmp_path):
    path = tmp_path / "white.ppm"
    write_ppm(path, Image(np.full((1, 1, 3), 255, dtype=np.uint8)))
    assert path.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_rejects_ascii_variant(tmp_path):
    path = tmp_path / "ascii.ppm"
    path.write_bytes(b"P3\n1 1\n255\n255 255 255\n")
    with pytest.raises(FileFormatError, match="P6"):
        read_ppm(path)


def test_ppm_rejects_wrong_maxval(tmp_path):
    path = tmp_path / "odd.ppm"
    path.write_bytes(b"P6\n1 1\n99\n\xff\xff\xff")
    with pytest.raises(FileFormatError, match="maxval"):
        read_ppm(path)


def test_ppm_rejects_truncated_payload(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(FileFormatError, match="payload"):
        read_ppm(path)


def test_ppm_rejects_non_numeric_header(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P6\nx 1\n255\n\x00\x00\x00")
    with pytest.raises(FileFormatError):
        read_ppm(path)


def test_ppm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "commented.ppm"
    path.write_bytes(b"P6\n# made by hand\n1 1\n# another\n255\n\x01\x02\x03")
    img = read_ppm(path)
    np.testing.assert_array_equal(img.pixels.reshape(-1), [1, 2, 3])


def test_pgm_round_trip(tmp_path):
    gray = Rng(3).integers(0, 256, (5, 7)).astype(np.uint8)
    path = tmp_path / "mask.pgm"
    write_pgm(path, gray)
    np.testing.assert_array_equal(read_pgm(path), gray)


def test_pgm_rejects_non_2d():
    with pytest.raises(ValueError):
        write_pgm("unused.pgm", np.zeros((2, 2, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# Packed datasets


def test_dataset_round_trip(tmp_path):
    images = [random_image(Rng(k), 4, 6) for k in range(3)]
    path = tmp_path / "set.imds"
    write_dataset(path, images)
    loaded = load_dataset(path)
    assert len(loaded) == 3
    for a, b in zip(images, loaded):
        assert a == b


def test_dataset_file_size_is_exact(tmp_path):
    images = [random_image(Rng(k), 4, 6) for k in range(3)]
    path = tmp_path / "set.imds"
    write_dataset(path, images)
    assert path.stat().st_size == 16 + 3 * 4 * 6 * 3


def test_dataset_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.imds"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FileFormatError, match="magic"):
        load_dataset(path)


def test_dataset_rejects_size_mismatch(tmp_path):
    images = [random_image(Rng(0), 2, 2)]
    path = tmp_path / "set.imds"
    write_dataset(path, images)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FileFormatError, match="bytes"):
        load_dataset(path)


def test_dataset_rejects_mixed_dims():
    with pytest.raises(ValueError):
        write_dataset("unused.imds",
                      [random_image(Rng(0), 2, 2), random_image(Rng(1), 2, 3)])


def test_pack_dataset_is_lexicographic(tmp_path):
    by_name = {"c.ppm": 30, "a.ppm": 10, "b.ppm": 20}
    for name, value in by_name.items():
        write_ppm(tmp_path / name,
                  Image(np.full((2, 2, 3), value, dtype=np.uint8)))
    images = pack_dataset(tmp_path)
    assert [int(img.pixels[0, 0, 0]) for img in images] == [10, 20, 30]


def test_pack_dataset_rejects_empty_dir(tmp_path):
    with pytest.raises(FileFormatError, match="no .ppm"):
        pack_dataset(tmp_path)


def test_pack_dataset_rejects_dim_mismatch(tmp_path):
    write_ppm(tmp_path / "a.ppm", random_image(Rng(0), 2, 2))
    write_ppm(tmp_path / "b.ppm", random_image(Rng(1), 4, 4))
    with pytest.raises(FileFormatError):
        pack_dataset(tmp_path)


# ---------------------------------------------------------------------------
# Box downsampling


def test_box_downsample_constant_is_constant():
    img = Image(np.full((8, 8, 3), 77, dtype=np.uint8))
    out = box_downsample(img, 4)
    assert (out.h, out.w) == (2, 2)
    np.testing.assert_array_equal(out.pixels, 77)


def test_box_downsample_checkerboard_rounds_up():
    # 2x2 blocks of 0/255: every 4x4 cell averages 127.5, and
    # round-half-away-from-zero gives 128.
    tile = np.kron(np.array([[0, 255], [255, 0]], dtype=np.uint8),
                   np.ones((2, 2), dtype=np.uint8))
    img = Image(np.repeat(np.tile(tile, (2, 2))[:, :, None], 3, axis=2))
    out = box_downsample(img, 4)
    np.testing.assert_array_equal(out.pixels, 128)


def test_box_downsample_hand_computed():
    pix = np.zeros((2, 2, 3), dtype=np.uint8)
    pix[0, 0] = 10
    pix[0, 1] = 20
    pix[1, 0] = 30
    pix[1, 1] = 41
    out = box_downsample(Image(pix), 2)
    # mean of (10, 20, 30, 41) is 25.25 -> 25
    np.testing.assert_array_equal(out.pixels, 25)


def test_box_downsample_validates_divisibility():
    with pytest.raises(ValueError):
        box_downsample(random_image(Rng(0), 3, 4), 2)
    with pytest.raises(ValueError):
        box_downsample(random_image(Rng(0), 4, 4), 0)


def test_box_downsample_factor_one_is_identity():
    img = random_image(Rng(5), 3, 3)
    assert box_downsample(img, 1) == img


# ---------------------------------------------------------------------------
# Checkpoints


def tiny_model():
    config = ModelConfig(layers=1, d=8, heads=2, d_ff=8,
                         scheme=Scheme("local1d", l_q=4, l_m=4), h=2, w=2)
    return config, build(config, Rng(123))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    config, model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, model.params)
    loaded_config, loaded_params = load_checkpoint(path)
    assert loaded_config == config
    assert list(loaded_params) == list(model.params)
    for name in model.params:
        np.testing.assert_array_equal(loaded_params[name], model.params[name])
        assert loaded_params[name].dtype == np.float32
    # The loaded pieces rebuild a working model.
    from_params(loaded_config, loaded_params)


def test_checkpoint_round_trip_encoder_decoder(tmp_path):
    config = ModelConfig(layers=1, d=8, heads=2, d_ff=16,
                         mode="encoder-decoder", encoder_layers=1,
                         scheme=Scheme("local1d", l_q=4, l_m=4),
                         h=4, w=4, h_s=1, w_s=1, distribution="dmol",
                         mixtures=2)
    model = build(config, Rng(7))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, model.params)
    loaded_config, loaded_params = load_checkpoint(path)
    assert loaded_config == config
    for name in model.params:
        np.testing.assert_array_equal(loaded_params[name], model.params[name])


def test_checkpoint_save_load_save_is_stable(tmp_path):
    config, model = tiny_model()
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(first, config, model.params)
    loaded_config, loaded_params = load_checkpoint(first)
    save_checkpoint(second, loaded_config, loaded_params)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_mismatched_config_names_first_bad_tensor(tmp_path):
    config, model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, model.params)
    _, params = load_checkpoint(path)
    wider = ModelConfig(layers=1, d=16, heads=2, d_ff=8,
                        scheme=Scheme("local1d", l_q=4, l_m=4), h=2, w=2)
    with pytest.raises(ValueError, match="embed.shared"):
        from_params(wider, params)
    del params["start"]
    with pytest.raises(ValueError, match="start"):
        from_params(config, params)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"JUNKxxxxxxxx")
    with pytest.raises(FileFormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    config, model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, model.params)
    data = path.read_bytes()
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(data[:len(data) - 10])
    with pytest.raises(FileFormatError, match="truncated"):
        load_checkpoint(clipped)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    config, model = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, model.params)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FileFormatError, match="trailing"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# Golden files: byte-stable on disk and parse identically everywhere


def _golden_sha(name):
    with open(os.path.join(GOLDEN_DIR, name), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_golden_ppm():
    assert _golden_sha("tiny.ppm") == \
        "2904f89b6d56dc32596fc657c793428265724349a5010116e6d6e8a69ba852c7"
    img = read_ppm(os.path.join(GOLDEN_DIR, "tiny.ppm"))
    expected = np.array([[[10, 20, 30], [40, 50, 60]],
                         [[70, 80, 90], [100, 110, 120]]], dtype=np.uint8)
    np.testing.assert_array_equal(img.pixels, expected)


def test_golden_dataset():
    assert _golden_sha("tiny.imds") == \
        "44407c11d4f799188a194f9a3eea297c93947f83957ae7d62a9dcdaa6e397196"
    images = load_dataset(os.path.join(GOLDEN_DIR, "tiny.imds"))
    assert len(images) == 2
    assert images[0].pixels[0, 0, 0] == 10
    assert images[1].pixels[0, 0, 0] == 245
    np.testing.assert_array_equal(images[1].pixels, 255 - images[0].pixels)


def test_golden_checkpoint():
    assert _golden_sha("tiny.ckpt") == \
        "4151d2580abe9ffd04adf40da2d1e0338cf952cd2a99067df4c4fd5b2f26fde1"
    config, params = load_checkpoint(os.path.join(GOLDEN_DIR, "tiny.ckpt"))
    assert config == ModelConfig(layers=1, d=8, heads=2, d_ff=8,
                                 scheme=Scheme("local1d", l_q=4, l_m=4),
                                 h=2, w=2)
    assert len(params) == 18
    np.testing.assert_allclose(
        params["start"][:3], [0.5361172, 0.6735994, -0.70929366], rtol=1e-6)
    from_params(config, params)


# ---------------------------------------------------------------------------
# Config text


MINIMAL = """
# smallest useful model
mode = decoder-only
layers = 1
d = 8
heads = 2
d_ff = 16
scheme = local1d
l_q = 4
l_m = 4
h = 2
w = 2
"""


def test_config_minimal_parses():
    config, train_fields = parse_config(MINIMAL)
    assert config.layers == 1
    assert config.scheme == Scheme("local1d", l_q=4, l_m=4)
    assert train_fields == {}


def test_config_unknown_key_is_named():
    with pytest.raises(ConfigError, match="laers"):
        parse_config(MINIMAL + "laers = 3\n")


def test_config_preset_expands_to_published_values():
    config, _ = parse_config("preset = cifar-cat\n")
    assert (config.layers, config.d, config.heads, config.d_ff) == \
        (12, 512, 4, 2048)
    assert config.dropout == 0.3
    assert (config.h, config.w) == (32, 32)
    assert config.distribution == "cat"


def test_config_preset_fields_can_be_overridden():
    config, _ = parse_config("preset = cifar-cat\nd = 64\nheads = 2\n")
    assert config.d == 64
    assert config.heads == 2
    assert config.layers == 12


def test_config_preset_scheme_params_can_be_overridden():
    config, _ = parse_config("preset = cifar-cat\nl_m = 512\n")
    assert config.scheme == Scheme("local1d", l_q=256, l_m=512)


def test_config_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config("preset = nope\n")


def test_config_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(MINIMAL + "layers = 2\n")


def test_config_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("layers 3\n")


def test_config_bad_int_value():
    with pytest.raises(ConfigError, match="layers"):
        parse_config(MINIMAL.replace("layers = 1", "layers = one"))


def test_config_requires_scheme():
    with pytest.raises(ConfigError, match="scheme"):
        parse_config("layers = 1\nd = 8\nheads = 2\nd_ff = 16\nh = 2\nw = 2\n")


def test_config_scheme_params_must_match_variant():
    with pytest.raises(ConfigError, match="does not take"):
        parse_config(MINIMAL + "h_q = 2\n")


def test_config_n_classes_none_and_int():
    config, _ = parse_config(MINIMAL + "n_classes = none\n")
    assert config.n_classes is None
    config, _ = parse_config(MINIMAL + "n_classes = 10\n")
    assert config.n_classes == 10


def test_config_invalid_model_raises_config_error():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL.replace("d = 8", "d = 10"))  # not divisible


def test_config_train_fields_extracted():
    text = MINIMAL + "steps = 50\nwarmup = 10\nclip_norm = 1.0\nseed = 3\n"
    _, train_fields = parse_config(text)
    assert train_fields == {"steps": 50, "warmup": 10, "clip_norm": 1.0,
                            "seed": 3}
    text = MINIMAL + "clip_norm = none\n"
    _, train_fields = parse_config(text)
    assert train_fields == {"clip_norm": None}


def test_parse_model_config_rejects_train_keys():
    with pytest.raises(ConfigError, match="training keys"):
        parse_model_config(MINIMAL + "steps = 50\n")


@pytest.mark.parametrize("config", [
    ModelConfig(layers=1, d=8, heads=2, d_ff=8,
                scheme=Scheme("local1d", l_q=4, l_m=4), h=2, w=2),
    ModelConfig(layers=2, d=8, heads=2, d_ff=8, distribution="dmol",
                mixtures=3, scheme=Scheme("local2d", h_q=2, w_q=2,
                                          h_m=1, w_m=1), h=4, w=4),
    ModelConfig(layers=1, d=8, heads=2, d_ff=8, mode="encoder-decoder",
                encoder_layers=2, scheme=Scheme("local1d", l_q=4, l_m=4),
                h=4, w=4, h_s=1, w_s=1, dropout=0.25),
    ModelConfig(layers=1, d=8, heads=2, d_ff=8, coord_encoding="learned",
                n_classes=7, scheme=Scheme("local1d", l_q=4, l_m=0),
                h=2, w=2),
])
def test_config_serialization_round_trip(config):
    assert parse_model_config(model_config_to_text(config)) == config
