"""Synthetic imagery: determinism, ground-truth boxes, motif contrast,
stratified splitting, and manifest round-trips."""

import numpy as np
import pytest
from PIL import Image

from roihash.dataset import (MARGIN, MOTIF_NAMES, Entry, SyntheticSpec, _motif_mask,
                             generate, load_batch, load_image, load_manifest,
                             render_image, save_manifest, split)
from roihash.losses import visual_similarity

SMALL = SyntheticSpec(num_classes=4, images_per_class=3, image_size=32,
                      min_scale=10, max_scale=14)


class TestSpec:
    def test_total(self):
        assert SyntheticSpec(num_classes=8, images_per_class=200).total == 1600

    def test_rejects_too_many_classes(self):
        with pytest.raises(ValueError):
            SyntheticSpec(num_classes=9)

    def test_rejects_oversized_motif(self):
        with pytest.raises(ValueError):
            SyntheticSpec(image_size=24, max_scale=26)


class TestMotifs:
    def test_every_class_draws_something(self):
        rng = np.random.default_rng(0)
        for label in range(len(MOTIF_NAMES)):
            mask = _motif_mask(label, 20, rng)
            assert mask.shape == (20, 20)
            assert mask.dtype == bool
            assert mask.any(), MOTIF_NAMES[label]

    def test_masks_distinct_between_classes(self):
        rng = np.random.default_rng(1)
        masks = [_motif_mask(lb, 20, np.random.default_rng(1)) for lb in range(8)]
        for i in range(8):
            for j in range(i + 1, 8):
                assert not np.array_equal(masks[i], masks[j]), (i, j)


class TestRender:
    def test_deterministic(self):
        a, box_a = render_image(SMALL, seed=5, image_id=9, label=2)
        b, box_b = render_image(SMALL, seed=5, image_id=9, label=2)
        assert np.array_equal(a, b)
        assert box_a == box_b

    def test_id_changes_image(self):
        a, _ = render_image(SMALL, seed=5, image_id=0, label=1)
        b, _ = render_image(SMALL, seed=5, image_id=1, label=1)
        assert not np.array_equal(a, b)

    def test_seed_changes_image(self):
        a, _ = render_image(SMALL, seed=5, image_id=0, label=1)
        b, _ = render_image(SMALL, seed=6, image_id=0, label=1)
        assert not np.array_equal(a, b)

    def test_dtype_and_shape(self):
        img, _ = render_image(SMALL, seed=0, image_id=0, label=0)
        assert img.dtype == np.uint8
        assert img.shape == (32, 32)

    def test_box_inside_margins(self):
        spec = SyntheticSpec()
        for image_id in range(40):
            _, box = render_image(spec, seed=3, image_id=image_id,
                                  label=image_id % 8)
            x1, y1, x2, y2 = box
            assert 0 < x2 - x1 <= spec.max_scale
            assert 0 < y2 - y1 <= spec.max_scale
            assert x1 >= MARGIN and y1 >= MARGIN
            assert x2 <= spec.image_size - MARGIN
            assert y2 <= spec.image_size - MARGIN

    def test_box_contrast_three_sigma(self):
        """Brightness inside the ground-truth box clears the background by
        at least 3 noise standard deviations averaged over the set, and
        never collapses below 2 on any single image."""
        spec = SyntheticSpec()
        margins = []
        for image_id in range(80):
            label = image_id % 8
            img, box = render_image(spec, seed=11, image_id=image_id, label=label)
            x1, y1, x2, y2 = box
            pixels = img.astype(np.float64) / 255.0
            inside = pixels[y1:y2, x1:x2].mean()
            mask = np.ones_like(pixels, dtype=bool)
            mask[y1:y2, x1:x2] = False
            margin = inside - pixels[mask].mean()
            assert margin >= 2 * spec.noise_sigma, \
                (image_id, MOTIF_NAMES[label], margin)
            margins.append(margin)
        assert np.mean(margins) >= 3 * spec.noise_sigma


class TestGenerate:
    def test_writes_images_and_manifest(self, tmp_path):
        entries = generate(SMALL, seed=2, out_dir=tmp_path)
        assert len(entries) == SMALL.total
        assert (tmp_path / "manifest.jsonl").exists()
        for e in entries[:3]:
            assert (tmp_path / e.path).exists()

    def test_labels_interleave(self, tmp_path):
        entries = generate(SMALL, seed=2, out_dir=tmp_path)
        for e in entries:
            assert e.label == e.id % SMALL.num_classes

    def test_deterministic_across_directories(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        ea = generate(SMALL, seed=4, out_dir=a)
        eb = generate(SMALL, seed=4, out_dir=b)
        assert (a / "manifest.jsonl").read_text() == (b / "manifest.jsonl").read_text()
        for x, y in zip(ea, eb):
            assert np.array_equal(load_image(a / x.path), load_image(b / y.path))

    def test_boxes_recorded(self, tmp_path):
        entries = generate(SMALL, seed=2, out_dir=tmp_path)
        for e in entries:
            assert e.box is not None and len(e.box) == 4


@pytest.fixture(scope="module")
def entries():
    return [Entry(id=i, path=f"images/img_{i:05d}.png", label=i % 4,
                  box=[0, 0, 4, 4]) for i in range(80)]


class TestSplit:
    def test_partition(self, entries):
        tr, va, te = split(entries, seed=0)
        ids = [e.id for part in (tr, va, te) for e in part]
        assert sorted(ids) == list(range(80))
        assert len(set(ids)) == 80

    def test_ratios(self, entries):
        tr, va, te = split(entries, (0.7, 0.2, 0.1), seed=0)
        assert (len(tr), len(va), len(te)) == (56, 16, 8)

    def test_stratified(self, entries):
        tr, va, te = split(entries, seed=0)
        for part, per_class in ((tr, 14), (va, 4), (te, 2)):
            counts = np.bincount([e.label for e in part], minlength=4)
            assert list(counts) == [per_class] * 4

    def test_deterministic_and_seed_sensitive(self, entries):
        a = split(entries, seed=0)
        b = split(entries, seed=0)
        c = split(entries, seed=1)
        assert [[e.id for e in p] for p in a] == [[e.id for e in p] for p in b]
        assert [[e.id for e in p] for p in a] != [[e.id for e in p] for p in c]

    def test_outputs_sorted_by_id(self, entries):
        for part in split(entries, seed=3):
            ids = [e.id for e in part]
            assert ids == sorted(ids)

    def test_bad_ratios(self, entries):
        with pytest.raises(ValueError):
            split(entries, (0.5, 0.2, 0.1), seed=0)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        entries = [Entry(id=0, path="images/a.png", label=3, box=[1, 2, 3, 4]),
                   Entry(id=1, path="images/b.png", label=0, box=None)]
        p = tmp_path / "m.jsonl"
        save_manifest(entries, p)
        loaded = load_manifest(p)
        assert loaded == entries

    def test_duplicate_ids_rejected(self, tmp_path):
        p = tmp_path / "dup.jsonl"
        e = Entry(id=7, path="x.png", label=0, box=None)
        save_manifest([e, e], p)
        with pytest.raises(ValueError):
            load_manifest(p)

    def test_blank_lines_ignored(self, tmp_path):
        p = tmp_path / "blank.jsonl"
        p.write_text('{"id": 0, "path": "x.png", "label": 1, "box": null}\n\n')
        loaded = load_manifest(p)
        assert len(loaded) == 1
        assert loaded[0].box is None


class TestLoading:
    def test_load_image_values(self, tmp_path):
        arr = np.arange(16, dtype=np.uint8).reshape(4, 4) * 17
        p = tmp_path / "x.png"
        Image.fromarray(arr, mode="L").save(p)
        loaded = load_image(p)
        assert loaded.shape == (1, 4, 4)
        assert np.array_equal(loaded, (arr / 255.0)[None])

    def test_load_batch_stacks(self, tmp_path):
        entries = generate(SMALL, seed=1, out_dir=tmp_path)[:4]
        batch = load_batch(entries, tmp_path)
        assert batch.shape == (4, 1, 32, 32)
        assert batch.dtype == np.float64
        assert batch.min() >= 0.0 and batch.max() <= 1.0


class TestSimilarityStructure:
    def test_within_class_beats_between_class(self):
        """The similarity weight the contrastive loss uses must, on average,
        score same-class pairs above different-class pairs."""
        spec = SyntheticSpec()
        per_class = 5
        images = {}
        for label in range(4):
            images[label] = [render_image(spec, seed=21, image_id=100 * label + i,
                                          label=label)[0] / 255.0
                            for i in range(per_class)]
        within, between = [], []
        for a in range(4):
            for b in range(a, 4):
                for i in range(per_class):
                    for j in range(per_class):
                        if a == b and i >= j:
                            continue
                        s = visual_similarity(images[a][i], images[b][j])
                        (within if a == b else between).append(s)
        assert np.mean(within) > np.mean(between)
