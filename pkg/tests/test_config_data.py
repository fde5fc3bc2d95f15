import os

import pytest
import torch

from spast.config import (
    TrainConfig,
    desk_preset,
    format_config,
    load_config,
    parse_config,
    save_config,
)
from spast.data import (
    DataPipeline,
    generate_corpus,
    list_images,
    load_image,
    make_content_image,
    make_style_image,
    resize_shorter_side,
    save_image,
    seeded_generator,
)
from spast.errors import ConfigError, UnreadableImageError


# ---------------------------------------------------------------- config

def test_config_defaults_match_training_protocol():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4
    assert cfg.batch == 1
    assert cfg.resize == 512
    assert cfg.crop == 256
    assert cfg.iterations == 160_000
    assert cfg.weights.style == cfg.weights.content == cfg.weights.identity == 1.0
    assert cfg.weights.adversarial == cfg.weights.style_prior == 1.0
    assert cfg.weights.identity_pixel == 50.0
    assert cfg.weights.identity_feature == 1.0
    assert cfg.prior.t_fixed == 500
    assert cfg.prior.total_steps == 1000


def test_config_round_trip():
    cfg = TrainConfig(iterations=123, seed=9, b=2, levels=("relu4_1",))
    cfg.weights.adversarial = 0.5
    cfg.prior.t_fixed = 250
    cfg.prior.include_jacobian = True
    again = parse_config(format_config(cfg))
    assert again == cfg


def test_config_file_io(tmp_path):
    path = tmp_path / "run.cfg"
    cfg = TrainConfig(iterations=10, crop=64, resize=64)
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_parse_comments_and_errors():
    cfg = parse_config("# comment\ntrain.iterations=5\n\nlgwssm.b=2\n")
    assert cfg.iterations == 5 and cfg.b == 2
    with pytest.raises(ConfigError):
        parse_config("unknown.key=3")
    with pytest.raises(ConfigError):
        parse_config("train.iterations")
    with pytest.raises(ConfigError):
        parse_config("prior.sample_t=maybe")
    with pytest.raises(ConfigError):
        parse_config("train.crop=63\ntrain.resize=64")


# ---------------------------------------------------------------- synthetic data

def test_generated_images_are_valid():
    g = seeded_generator(0, "t")
    content = make_content_image(g, 64)
    assert content.shape == (3, 64, 64)
    assert float(content.min()) >= 0 and float(content.max()) <= 1
    for family in ("stripes", "checker", "blobs", "speckle"):
        style = make_style_image(seeded_generator(1, family), 64, family)
        assert style.shape == (3, 64, 64)
        assert float(style.min()) >= 0 and float(style.max()) <= 1


def test_corpus_generation_and_reuse(tmp_path):
    c_dir, s_dir = generate_corpus(tmp_path, n_content=4, n_style=3, size=64)
    assert len(list_images(c_dir)) == 4
    assert len(list_images(s_dir)) == 3
    first = load_image(list_images(c_dir)[0])
    # regeneration must not overwrite (same bytes)
    generate_corpus(tmp_path, n_content=4, n_style=3, size=64)
    assert torch.equal(load_image(list_images(c_dir)[0]), first)


def test_image_round_trip(tmp_path):
    img = make_content_image(seeded_generator(2, "x"), 32)
    path = tmp_path / "img.png"
    save_image(img, path)
    loaded = load_image(path)
    assert loaded.shape == (3, 32, 32)
    assert float((loaded - img).abs().max()) <= 1.0 / 255.0 + 1e-6


def test_unreadable_image_error(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not a png at all")
    with pytest.raises(UnreadableImageError, match="broken.png"):
        load_image(path)


def test_resize_shorter_side():
    img = torch.rand(3, 32, 64, generator=seeded_generator(3))
    out = resize_shorter_side(img, 16)
    assert out.shape == (3, 16, 32)
    tall = resize_shorter_side(torch.rand(3, 64, 32), 16)
    assert tall.shape == (3, 32, 16)


# ---------------------------------------------------------------- pipeline

def test_pipeline_determinism_and_crop(tmp_path):
    c_dir, s_dir = generate_corpus(tmp_path, n_content=5, n_style=3, size=64)
    pipe1 = DataPipeline(c_dir, s_dir, resize=64, crop=32, seed=7)
    pipe2 = DataPipeline(c_dir, s_dir, resize=64, crop=32, seed=7)
    for step in range(5):
        a_c, a_s = pipe1.sample(step)
        b_c, b_s = pipe2.sample(step)
        assert a_c.shape == (3, 32, 32) and a_s.shape == (3, 32, 32)
        assert torch.equal(a_c, b_c) and torch.equal(a_s, b_s)
    other = DataPipeline(c_dir, s_dir, resize=64, crop=32, seed=8)
    diff = any(not torch.equal(pipe1.sample(s)[0], other.sample(s)[0]) for s in range(5))
    assert diff


def test_pipeline_empty_dir_error(tmp_path):
    os.makedirs(tmp_path / "empty", exist_ok=True)
    c_dir, s_dir = generate_corpus(tmp_path, n_content=1, n_style=1, size=64)
    with pytest.raises(FileNotFoundError):
        DataPipeline(tmp_path / "empty", s_dir, 64, 64, 0)


# ---------------------------------------------------------------- preset

def test_desk_preset(tmp_path):
    cfg = desk_preset(tmp_path, iterations=50)
    assert cfg.iterations == 50
    assert cfg.crop == 64 and cfg.resize == 64 and cfg.b == 2
    assert cfg.lr == 1e-4 and cfg.batch == 1
    assert len(list_images(cfg.content_dir)) == 50
    assert len(list_images(cfg.style_dir)) == 10
