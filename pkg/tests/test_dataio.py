import numpy as np
import pytest

from mixseg import dataio
from mixseg.errors import DomainError, FormatError


class TestNetpbm:
    def test_ppm_roundtrip_is_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 5, 7))
        p = tmp_path / "x.ppm"
        dataio.write_ppm(p, img)
        back = dataio.read_ppm(p)
        want = np.floor(img * 255.0 + 0.5) / 255.0
        assert back.shape == (3, 5, 7)
        assert np.abs(back - want).max() < 1e-15

    def test_ppm_golden_bytes(self, tmp_path):
        # 1x2 image, hand-assembled: header then interleaved RGB rows
        img = np.zeros((3, 1, 2))
        img[:, 0, 0] = [0.0, 0.5, 1.0]   # -> 0, 128, 255
        img[:, 0, 1] = [1.0, 0.0, 0.2]   # -> 255, 0, 51
        p = tmp_path / "g.ppm"
        dataio.write_ppm(p, img)
        assert p.read_bytes() == b"P6\n2 1\n255\n" + bytes([0, 128, 255, 255, 0, 51])

    def test_pgm_roundtrip(self, tmp_path):
        mask = np.array([[0, 1, 255], [3, 2, 0]], dtype=np.uint8)
        p = tmp_path / "m.pgm"
        dataio.write_pgm(p, mask)
        assert (dataio.read_pgm(p) == mask).all()

    def test_header_comments_and_whitespace(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5 # comment\n# another\n 2\t1 \n255\n\x07\x09")
        back = dataio.read_pgm(p)
        assert back.tolist() == [[7, 9]]

    def test_bad_magic_offset(self, tmp_path):
        p = tmp_path / "b.ppm"
        p.write_bytes(b"P3\n1 1\n255\n abc")
        with pytest.raises(FormatError) as ei:
            dataio.read_ppm(p)
        assert ei.value.offset == 0

    def test_truncated_raster_offset(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)  # needs 12
        with pytest.raises(FormatError) as ei:
            dataio.read_ppm(p)
        assert ei.value.offset == len(b"P6\n2 2\n255\n") + 5

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "tr.pgm"
        p.write_bytes(b"P5\n1 1\n255\n\x00\x00")
        with pytest.raises(FormatError):
            dataio.read_pgm(p)

    def test_bad_maxval(self, tmp_path):
        p = tmp_path / "mv.pgm"
        p.write_bytes(b"P5\n1 1\n999\n\x00")
        with pytest.raises(FormatError):
            dataio.read_pgm(p)

    def test_missing_header_token(self, tmp_path):
        p = tmp_path / "mh.pgm"
        p.write_bytes(b"P5\n1")
        with pytest.raises(FormatError):
            dataio.read_pgm(p)

    def test_maxval_rescale(self, tmp_path):
        p = tmp_path / "r.ppm"
        p.write_bytes(b"P6\n1 1\n100\n" + bytes([50, 100, 0]))
        back = dataio.read_ppm(p)
        assert np.abs(back.reshape(-1) - [0.5, 1.0, 0.0]).max() < 1e-15


class TestManifest:
    def test_roundtrip(self, tmp_path):
        rows = [
            dataio.ManifestRow(0, "images/0.ppm", "masks/0.pgm", "labeled"),
            dataio.ManifestRow(1, "images/1.ppm", "masks/1.pgm", "unlabeled"),
            dataio.ManifestRow(2, "images/2.ppm", "masks/2.pgm", "val"),
        ]
        p = tmp_path / "manifest.tsv"
        dataio.write_manifest(p, rows, 4)
        back, nc = dataio.read_manifest(p)
        assert nc == 4
        assert back == rows

    def test_header_required(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("0\ta\tb\tlabeled\n")
        with pytest.raises(FormatError):
            dataio.read_manifest(p)

    def test_bad_split_and_duplicate(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("#classes: 4\n0\ta\tb\ttrain\n")
        with pytest.raises(FormatError):
            dataio.read_manifest(p)
        p.write_text("#classes: 4\n0\ta\tb\tval\n0\tc\td\tval\n")
        with pytest.raises(FormatError):
            dataio.read_manifest(p)


class TestSplit:
    def test_worked_example_counts(self):
        # n=100, val=20 leaves 80; 10% of 80 rounds to 8 labeled, 72 unlabeled
        splits = dataio.split_manifest(100, 0.1, 20, seed=0)
        assert splits.count("labeled") == 8
        assert splits.count("unlabeled") == 72
        assert splits.count("val") == 20

    def test_deterministic_and_seed_sensitive(self):
        a = dataio.split_manifest(50, 0.2, 10, seed=3)
        b = dataio.split_manifest(50, 0.2, 10, seed=3)
        c = dataio.split_manifest(50, 0.2, 10, seed=4)
        assert a == b
        assert a != c

    def test_validation(self):
        with pytest.raises(DomainError):
            dataio.split_manifest(10, 0.0, 2, 0)
        with pytest.raises(DomainError):
            dataio.split_manifest(10, 0.5, 10, 0)
        with pytest.raises(DomainError):
            dataio.split_manifest(10, 0.01, 2, 0)  # rounds to zero labeled


class TestGenerate:
    def test_dataset_is_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        dataio.generate_shapes(a, n_images=6, size=16, seed=9, val_count=2,
                               labeled_fraction=0.5)
        dataio.generate_shapes(b, n_images=6, size=16, seed=9, val_count=2,
                               labeled_fraction=0.5)
        for rel in ["manifest.tsv"] + [f"images/{i}.ppm" for i in range(6)]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_masks_and_images_well_formed(self, tmp_path):
        rows = dataio.generate_shapes(tmp_path / "d", n_images=8, size=16, seed=1,
                                      val_count=2)
        assert len(rows) == 8
        for r in rows:
            img = dataio.read_ppm(tmp_path / "d" / r.image)
            mask = dataio.read_pgm(tmp_path / "d" / r.mask)
            assert img.shape == (3, 16, 16)
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert mask.max() < dataio.NUM_CLASSES
            assert (mask > 0).any()  # at least one shape

    def test_every_class_appears_often(self, tmp_path):
        rows = dataio.generate_shapes(tmp_path / "d", n_images=500, size=8, seed=0,
                                      val_count=10, min_frac=0.3, max_frac=0.6)
        present = np.zeros(dataio.NUM_CLASSES)
        for r in rows:
            mask = dataio.read_pgm(tmp_path / "d" / r.mask)
            for c in range(1, dataio.NUM_CLASSES):
                present[c] += (mask == c).any()
        for c in range(1, dataio.NUM_CLASSES):
            assert present[c] / 500 >= 0.2, (c, present[c])

    def test_load_split_quarantines_unlabeled_masks(self, tmp_path):
        root = tmp_path / "d"
        rows = dataio.generate_shapes(root, n_images=10, size=16, seed=2, val_count=2,
                                      labeled_fraction=0.25)
        # corrupt every unlabeled mask on disk; loading must not notice
        for r in rows:
            if r.split == "unlabeled":
                (root / r.mask).write_bytes(b"garbage")
        unlabeled = dataio.load_split(root, rows, "unlabeled")
        assert len(unlabeled) == 6
        assert all(s.mask is None for s in unlabeled)
        labeled = dataio.load_split(root, rows, "labeled")
        assert len(labeled) == 2
        assert all(s.mask is not None for s in labeled)
