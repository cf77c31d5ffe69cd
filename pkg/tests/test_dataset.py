import filecmp
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fpkit import io
from fpkit.dataset import generate_dataset, load_split, make_object, preprocess_stack
from fpkit.errors import CorpusError
from fpkit.forward import build_geometry, forward_measure
from fpkit.procedural import procedural_texture

TWO_PI = 2 * np.pi


def test_make_object_examples():
    zeros = np.zeros((8, 8), np.uint8)
    mid = np.full((8, 8), 128, np.uint8)
    full = np.full((8, 8), 255, np.uint8)
    s = make_object(full, zeros, 8)
    assert np.all(s.phase == 0) and np.all(s.amplitude == 1.0)
    s = make_object(mid, mid, 8)
    assert np.allclose(s.phase, TWO_PI * 128 / 255)
    assert s.phase[0, 0] == pytest.approx(3.1539, abs=1e-4)


def test_make_object_wraps_full_phase_and_resizes():
    full = np.full((16, 16), 255, np.uint8)
    s = make_object(full, full, 32)
    assert s.amplitude.shape == (32, 32)
    assert np.all(s.phase == 0)


def test_make_object_from_files(tmp_path):
    rng = np.random.default_rng(0)
    a, p = procedural_texture(rng, 40), procedural_texture(rng, 40)
    Image.fromarray(a).save(tmp_path / "a.png")
    Image.fromarray(p).save(tmp_path / "p.png")
    s = make_object(tmp_path / "a.png", tmp_path / "p.png", 32)
    assert s.amplitude.min() >= 0 and s.amplitude.max() <= 1
    assert s.phase.min() >= 0 and s.phase.max() < TWO_PI


def test_make_object_undecodable(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(CorpusError):
        make_object(bad, bad, 8)


def test_preprocess_rules(rng):
    g = build_geometry(32, 8, 0.4)
    o = rng.random((32, 32)) * np.exp(1j * rng.random((32, 32)))
    stack = forward_measure(o, g)
    stack.images[1] = 3.0
    x = preprocess_stack(stack, 32)
    assert x.shape == (g.count, 32, 32)
    assert not np.any(x[1])
    for k in (0, 2, g.dc_index):
        assert x[k].min() == 0.0 and x[k].max() == 1.0


def test_preprocess_same_size_only_rescales(rng):
    g = build_geometry(16, 16, 0.0)
    o = rng.random((16, 16)) + 0.1
    stack = forward_measure(o, g)
    img = stack.images[0]
    expect = (img - img.min()) / (img.max() - img.min())
    assert np.array_equal(preprocess_stack(stack, 16)[0], expect)


def test_generate_dataset_deterministic(tmp_path):
    for name in ("a", "b"):
        generate_dataset(tmp_path / name, 3, 2, N=32, m=8, overlap=0.4, seed=11)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def same(c):
        return not c.diff_files and not c.left_only and not c.right_only and all(
            same(s) for s in c.subdirs.values())

    assert same(cmp)
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_generate_dataset_splits_and_ranges(tmp_path):
    man = generate_dataset(tmp_path, 0, 5, N=32, m=8, overlap=0.15, seed=3)
    assert man["train"]["samples"] == []
    test = load_split(tmp_path / "test")
    assert len(test) == 5
    ids = [s.id for s in test]
    assert len(set(ids)) == 5
    for s in test:
        assert s.amplitude.min() >= 0 and s.amplitude.max() <= 1
        assert s.phase.min() >= 0 and s.phase.max() < TWO_PI
    for e in man["test"]["samples"]:
        assert e["source_pair"][0] != e["source_pair"][1]
        for key in ("amplitude", "phase", "stack"):
            assert (tmp_path / "test" / e[key]).exists()


def test_stored_stack_reproduced_from_stored_object(tmp_path):
    generate_dataset(tmp_path, 2, 1, N=32, m=8, overlap=0.65, seed=5)
    for split in ("train", "test"):
        for s in load_split(tmp_path / split):
            again = forward_measure(s.field, s.stack.geometry)
            assert np.array_equal(again.images, s.stack.images)


def test_generate_from_corpus(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rng = np.random.default_rng(1)
    for k in range(4):
        Image.fromarray(procedural_texture(rng, 48)).save(corpus / f"img{k}.png")
    man = generate_dataset(tmp_path / "out", 3, 2, N=32, m=8, overlap=0.4, seed=2, corpus_dir=corpus)
    for split in ("train", "test"):
        for e in man[split]["samples"]:
            assert e["source_pair"][0] != e["source_pair"][1]


def test_empty_corpus(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(CorpusError):
        generate_dataset(tmp_path / "out", 1, 1, N=32, m=8, overlap=0.4, corpus_dir=tmp_path / "empty")


def test_stack_file_roundtrip(tmp_path, rng):
    g = build_geometry(32, 8, 0.4)
    stack = forward_measure(rng.random((32, 32)) * np.exp(1j * rng.random((32, 32))), g, "s1")
    io.save_stack(stack, tmp_path / "s")
    back = io.load_stack(tmp_path / "s")
    assert np.array_equal(back.images, stack.images)
    assert back.scale == stack.scale and back.sample_id == "s1"
    raw = (tmp_path / "s" / "stack.f64").read_bytes()
    assert raw == stack.images.astype("<f8").tobytes()


def test_stack_f32_layout(tmp_path, rng):
    g = build_geometry(32, 8, 0.0)
    stack = forward_measure(rng.random((32, 32)), g)
    io.save_stack(stack, tmp_path, dtype="f32le")
    raw = np.frombuffer((tmp_path / "stack.f32").read_bytes(), "<f4")
    assert np.array_equal(raw.reshape(stack.images.shape), stack.images.astype(np.float32))
    manifest = io.read_json(tmp_path / "manifest.json")
    assert manifest["dtype"] == "f32le" and manifest["L"] == g.count and manifest["m"] == 8


def test_phase_png_encoding(tmp_path):
    phase = np.array([[0.0, np.pi, TWO_PI * (1 - 1e-7), 1.0]])
    io.save_amplitude_phase(tmp_path, np.ones_like(phase), phase)
    codes = io.read_png16(tmp_path / "phase.png")
    assert codes.tolist() == [[0, round(65535 / 2), 0, round(65535 / TWO_PI)]]
