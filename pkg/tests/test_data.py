"""Task folders, synthetic style rendering, and style separability."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from stylemuseum.backbone.text import PLACEHOLDER, Tokenizer
from stylemuseum.data import (
    StyleSpec,
    StyleTask,
    load_style_task,
    preset_styles,
    synth_codec_corpus,
    synth_style_task,
    write_style_task,
)


# ----------------------------------------------------------------- structs

def test_style_spec_validation():
    good = StyleSpec("s", palette=((1, 0, 0), (0, 1, 0), (0, 0, 1)))
    assert good.pattern == "stripes"
    with pytest.raises(ValueError):
        StyleSpec("s", palette=((1, 0, 0), (0, 1, 0)))
    with pytest.raises(ValueError):
        StyleSpec("s", palette=((1, 0, 0), (0, 1, 0), (0, 0, 1)), pattern="plaid")
    with pytest.raises(ValueError):
        StyleSpec("s", palette=((1, 0, 0), (0, 1, 0), (0, 0, 1)), frequency=1)


def test_synth_task_shapes_and_prompts():
    task = synth_style_task(preset_styles(1)[0], n=6, seed=0)
    assert task.images.shape == (6, 3, 32, 32)
    assert task.images.dtype == torch.float32
    assert float(task.images.min()) >= 0.0
    assert float(task.images.max()) <= 1.0
    assert task.n == 6
    assert len(task.prompts) == 6
    tok = Tokenizer()
    for text, ids in zip(task.prompt_texts, task.prompts):
        assert PLACEHOLDER in text
        assert tok.placeholder_position(ids) is not None


def test_synth_task_seeded_determinism():
    spec = preset_styles(2)[1]
    a = synth_style_task(spec, n=4, seed=9)
    b = synth_style_task(spec, n=4, seed=9)
    assert torch.equal(a.images, b.images)
    c = synth_style_task(spec, n=4, seed=10)
    assert not torch.equal(a.images, c.images)


def test_synth_task_rejects_zero_images():
    with pytest.raises(ValueError):
        synth_style_task(preset_styles(1)[0], n=0)


def test_preset_styles_distinct_names_and_bounds():
    specs = preset_styles(12)
    assert len(specs) == 12
    assert len({s.name for s in specs}) == 12
    for s in specs:
        for color in s.palette:
            assert all(0.0 <= c <= 1.0 for c in color)
    with pytest.raises(ValueError):
        preset_styles(0)
    with pytest.raises(ValueError):
        preset_styles(13)


# ------------------------------------------------------------ separability

def _color_histogram(images: torch.Tensor, bins: int = 8) -> np.ndarray:
    """Normalized per-channel histogram over a stack of images."""
    out = []
    for c in range(3):
        h, _ = np.histogram(images[:, c].numpy().ravel(), bins=bins, range=(0.0, 1.0))
        out.append(h / h.sum())
    return np.concatenate(out)


def test_styles_are_separable_by_color_histogram():
    tasks = [synth_style_task(s, n=6, seed=50 + i) for i, s in enumerate(preset_styles(3))]
    hists = [_color_histogram(t.images) for t in tasks]
    for i in range(3):
        for j in range(i + 1, 3):
            l1 = float(np.abs(hists[i] - hists[j]).sum())
            assert l1 > 0.2, f"styles {i} and {j} nearly identical (L1 {l1:.3f})"


def test_styles_are_separable_by_linear_probe():
    # a linear classifier on raw pixels should tell the styles apart easily
    sklearn = pytest.importorskip("sklearn")
    from sklearn.linear_model import LogisticRegression

    del sklearn
    specs = preset_styles(3)
    train = [synth_style_task(s, n=8, seed=60 + i) for i, s in enumerate(specs)]
    test = [synth_style_task(s, n=8, seed=90 + i) for i, s in enumerate(specs)]
    xtr = np.concatenate([t.images.numpy().reshape(t.n, -1) for t in train])
    ytr = np.concatenate([np.full(t.n, i) for i, t in enumerate(train)])
    xte = np.concatenate([t.images.numpy().reshape(t.n, -1) for t in test])
    yte = np.concatenate([np.full(t.n, i) for i, t in enumerate(test)])
    clf = LogisticRegression(max_iter=2000, random_state=0).fit(xtr, ytr)
    acc = float((clf.predict(xte) == yte).mean())
    assert acc > 0.9, f"probe accuracy {acc:.2f}"


# ---------------------------------------------------------------- folder IO

def test_write_then_load_round_trip(tmp_path):
    task = synth_style_task(preset_styles(1)[0], n=4, seed=3)
    d = write_style_task(task, tmp_path / "style_a")
    assert (d / "images").is_dir()
    assert len(list((d / "images").glob("*.png"))) == 4
    assert (d / "prompts.txt").is_file()
    loaded = load_style_task(d, task_id=5)
    assert loaded.style_name == task.style_name
    assert loaded.task_id == 5
    assert loaded.prompt_texts == task.prompt_texts
    assert loaded.prompts == task.prompts
    # 8-bit quantization bounds the pixel error
    assert float((loaded.images - task.images).abs().max()) <= (0.5 / 255.0) + 1e-6


def test_load_twice_bitwise_identical(tmp_path):
    task = synth_style_task(preset_styles(1)[0], n=3, seed=4)
    d = write_style_task(task, tmp_path / "s")
    a = load_style_task(d)
    b = load_style_task(d)
    assert torch.equal(a.images, b.images)


def test_load_accepts_flat_folder_layout(tmp_path):
    task = synth_style_task(preset_styles(1)[0], n=2, seed=5)
    d = tmp_path / "flat"
    d.mkdir()
    for i in range(task.n):
        arr = (task.images[i].numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Image.fromarray(arr).save(d / f"{i}.png")
    (d / "prompts.txt").write_text("\n".join(task.prompt_texts) + "\n")
    loaded = load_style_task(d)
    assert loaded.n == 2
    assert loaded.style_name == "flat"


def test_load_resizes_and_center_crops(tmp_path):
    d = tmp_path / "big"
    (d / "images").mkdir(parents=True)
    # 64x48 image: left third red, middle green, right blue; center crop keeps
    # the middle band, so green must dominate after the resize
    arr = np.zeros((48, 64, 3), dtype=np.uint8)
    arr[:, :21, 0] = 255
    arr[:, 21:43, 1] = 255
    arr[:, 43:, 2] = 255
    Image.fromarray(arr).save(d / "images" / "0.png")
    (d / "prompts.txt").write_text(f"a circle in {PLACEHOLDER} style\n")
    loaded = load_style_task(d, image_size=32)
    assert loaded.images.shape == (1, 3, 32, 32)
    means = loaded.images[0].mean(dim=(1, 2))
    assert float(means[1]) > float(means[0])
    assert float(means[1]) > float(means[2])


def test_meta_json_overrides_style_name(tmp_path):
    task = synth_style_task(preset_styles(1)[0], n=2, seed=6)
    d = write_style_task(task, tmp_path / "renamed_dir")
    (d / "meta.json").write_text(json.dumps({"style_name": "proper-name"}))
    assert load_style_task(d).style_name == "proper-name"
    (d / "meta.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_style_task(d)


def test_load_error_taxonomy(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_style_task(tmp_path / "missing")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError):
        load_style_task(empty)  # no images
    task = synth_style_task(preset_styles(1)[0], n=2, seed=7)
    d = write_style_task(task, tmp_path / "bad_counts")
    (d / "prompts.txt").write_text(task.prompt_texts[0] + "\n")  # 2 images, 1 prompt
    with pytest.raises(ValueError):
        load_style_task(d)
    d2 = write_style_task(task, tmp_path / "no_placeholder")
    (d2 / "prompts.txt").write_text("a circle\na square\n")
    with pytest.raises(ValueError):
        load_style_task(d2)
    d3 = write_style_task(task, tmp_path / "no_prompts")
    (d3 / "prompts.txt").unlink()
    with pytest.raises(ValueError):
        load_style_task(d3)


def test_explicit_prompts_file(tmp_path):
    task = synth_style_task(preset_styles(1)[0], n=2, seed=8)
    d = write_style_task(task, tmp_path / "s")
    alt = tmp_path / "alt_prompts.txt"
    alt.write_text(f"a square in {PLACEHOLDER} style\na cross in {PLACEHOLDER} style\n")
    loaded = load_style_task(d, prompts_file=alt)
    assert loaded.prompt_texts[0] == f"a square in {PLACEHOLDER} style"


def test_validate_rejects_out_of_range_and_dtype():
    tok = Tokenizer()
    text = f"a circle in {PLACEHOLDER} style"
    ids = tok.encode(text)
    bad = StyleTask("s", torch.full((1, 3, 8, 8), 1.5), [ids], [text])
    from stylemuseum.data import _validate_task

    with pytest.raises(ValueError):
        _validate_task(bad, tok)
    wrong_dtype = StyleTask("s", torch.zeros(1, 3, 8, 8, dtype=torch.float64), [ids], [text])
    with pytest.raises(ValueError):
        _validate_task(wrong_dtype, tok)


# ------------------------------------------------------------ codec corpus

def test_codec_corpus_shape_and_determinism():
    a = synth_codec_corpus(seed=1, n=12, image_size=32)
    b = synth_codec_corpus(seed=1, n=12, image_size=32)
    assert a.shape == (12, 3, 32, 32)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    c = synth_codec_corpus(seed=2, n=12, image_size=32)
    assert not torch.equal(a, c)
