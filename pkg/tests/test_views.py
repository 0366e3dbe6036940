import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cofidec.views import (
    CropView,
    ImageGrid,
    Patch,
    SaliencyMap,
    ViewError,
    ViewParams,
    coarse_decompose,
    decompose,
    fine_decompose,
    local_saliency,
    unify,
)


def checkerboard(w: int, h: int, c: int = 1) -> ImageGrid:
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((xx + yy) % 2).astype(float)
    return ImageGrid(np.repeat(board[:, :, None], c, axis=2))


@st.composite
def images(draw, max_side: int = 12):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    c = draw(st.integers(1, 3))
    px = draw(arrays(np.float64, (h, w, c), elements=st.floats(0, 1, allow_nan=False)))
    return ImageGrid(px)


class TestImageGrid:
    def test_from_flat_row_major(self):
        img = ImageGrid.from_flat(3, 2, 1, [0, 0.1, 0.2, 0.3, 0.4, 0.5])
        assert img.width == 3 and img.height == 2
        assert img.pixels[1, 0, 0] == 0.3

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError, match="expected 6"):
            ImageGrid.from_flat(3, 2, 1, [0.0] * 5)

    @pytest.mark.parametrize("value", [-0.1, 1.5, np.nan])
    def test_rejects_out_of_range(self, value):
        with pytest.raises(ValueError):
            ImageGrid(np.full((2, 2, 1), value))

    def test_two_dimensional_input(self):
        assert ImageGrid(np.zeros((2, 3))).channels == 1


class TestCoarse:
    def test_four_by_four_means(self):
        px = np.arange(16, dtype=float).reshape(4, 4) / 15
        patches = coarse_decompose(ImageGrid(px), (2, 2), 2)
        assert len(patches) == 4
        for p in patches:
            x, y, w, h = p.region
            assert (p.image.width, p.image.height) == (1, 1)
            assert p.image.pixels[0, 0, 0] == pytest.approx(px[y : y + h, x : x + w].mean(), abs=1e-12)
            assert p.image.scale == 2
        assert [p.region for p in patches] == [(0, 0, 2, 2), (2, 0, 2, 2), (0, 2, 2, 2), (2, 2, 2, 2)]

    def test_identity(self):
        img = ImageGrid(np.random.default_rng(0).uniform(size=(5, 7, 2)))
        (patch,) = coarse_decompose(img, (1, 1), 1)
        assert patch.image == img
        assert patch.region == (0, 0, 7, 5)

    @pytest.mark.parametrize("grid,factor", [((1, 1), 1), ((2, 3), 2), ((3, 2), 3)])
    def test_constant_preserved(self, grid, factor):
        img = ImageGrid(np.full((6, 6, 3), 0.5))
        for p in coarse_decompose(img, grid, factor):
            assert np.all(p.image.pixels == 0.5)

    def test_edge_padding(self):
        px = np.zeros((3, 3, 1))
        px[:, 0] = 1.0
        patches = coarse_decompose(ImageGrid(px), (1, 2), 2)
        # the left block is one column wide; padding replicates that column
        assert [p.region for p in patches] == [(0, 0, 1, 3), (1, 0, 2, 3)]
        assert np.all(patches[0].image.pixels == 1.0)
        assert np.all(patches[1].image.pixels == 0.0)

    def test_uneven_grid_has_no_empty_patch(self):
        patches = coarse_decompose(ImageGrid(np.full((6, 6), 0.5)), (3, 2), 3)
        assert len(patches) == 6
        assert all(p.region[2] > 0 and p.region[3] > 0 for p in patches)

    def test_grid_too_fine(self):
        with pytest.raises(ViewError):
            coarse_decompose(ImageGrid(np.zeros((2, 2))), (3, 1))

    @given(images(), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
    def test_tiling_and_pooling(self, img, rows, cols, factor):
        if rows > img.height or cols > img.width:
            return
        try:
            patches = coarse_decompose(img, (rows, cols), factor)
        except ViewError:
            return
        cover = np.zeros((img.height, img.width), dtype=int)
        for p in patches:
            x, y, w, h = p.region
            cover[y : y + h, x : x + w] += 1
        assert np.all(cover == 1)
        # pooling conserves the mean over divisible dimensions
        if img.height % (rows * factor) == 0 and img.width % (cols * factor) == 0:
            for p in patches:
                x, y, w, h = p.region
                block = img.pixels[y : y + h, x : x + w]
                assert abs(p.image.pixels.mean() - block.mean()) <= 1e-9


class TestSaliency:
    def test_constant_zero(self):
        s = local_saliency(ImageGrid(np.full((8, 8, 3), 0.3)), 2)
        assert np.all(s.scores == 0)

    def test_single_contrast_window(self):
        px = np.full((8, 8, 1), 0.5)
        px[4:6, 2:4, 0] = [[0, 1], [1, 0]]
        s = local_saliency(ImageGrid(px), 2)
        flat = s.scores.ravel()
        assert int(np.argmax(flat)) == 2 * 4 + 1
        assert np.sum(flat == flat.max()) == 1

    @pytest.mark.parametrize("channels", [1, 3])
    def test_checkerboard_variance(self, channels):
        s = local_saliency(checkerboard(6, 6, channels), 2)
        assert np.allclose(s.scores, 0.25 * channels, atol=1e-15)

    def test_window_range(self):
        with pytest.raises(ViewError):
            local_saliency(ImageGrid(np.zeros((4, 4))), 5)

    def test_external_map(self):
        grid = ImageGrid(np.array([[0.0, 0.5], [0.25, 1.0]]))
        s = SaliencyMap.from_grid(grid, 2)
        assert s.scores.tolist() == [[0.0, 0.5], [0.25, 1.0]]
        with pytest.raises(ValueError):
            SaliencyMap.from_grid(ImageGrid(np.zeros((2, 2, 2))), 2)


class TestFine:
    def test_salient_region_first(self):
        px = np.zeros((8, 8, 1))
        px[0:2, 6:8, 0] = [[0, 1], [1, 0]]
        img = ImageGrid(px)
        crops, _ = fine_decompose(img, local_saliency(img, 2), 1, (2, 2))
        assert crops[0].region == (6, 0, 2, 2)
        assert crops[0].pixels == img.crop(6, 0, 2, 2)

    def test_tie_break_row_major(self):
        img = ImageGrid(np.full((8, 8, 1), 0.5))
        crops, clamped = fine_decompose(img, local_saliency(img, 4), 2, (4, 4))
        assert not clamped
        assert [c.region for c in crops] == [(0, 0, 4, 4), (4, 0, 4, 4)]
        assert [c.saliency_score for c in crops] == [0.0, 0.0]

    def test_clamp(self):
        img = ImageGrid(np.full((4, 4, 1), 0.5))
        with pytest.warns(UserWarning):
            crops, clamped = fine_decompose(img, local_saliency(img, 2), 9, (2, 2))
        assert clamped and len(crops) == 4

    def test_crop_clamped_into_bounds(self):
        px = np.zeros((8, 8, 1))
        px[6:8, 6:8, 0] = [[0, 1], [1, 0]]
        img = ImageGrid(px)
        crops, _ = fine_decompose(img, local_saliency(img, 2), 1, (4, 4))
        assert crops[0].region == (4, 4, 4, 4)

    def test_bad_crop_size(self):
        img = ImageGrid(np.zeros((4, 4)))
        with pytest.raises(ViewError):
            fine_decompose(img, local_saliency(img, 2), 1, (5, 1))

    @given(images(max_side=10), st.integers(1, 6))
    def test_monotone_and_in_bounds(self, img, m):
        window = min(2, img.width, img.height)
        crop = (max(1, img.width // 2), max(1, img.height // 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            crops, _ = fine_decompose(img, local_saliency(img, window), m, crop)
        scores = [c.saliency_score for c in crops]
        assert scores == sorted(scores, reverse=True)
        for c in crops:
            x, y, w, h = c.region
            assert 0 <= x and 0 <= y and x + w <= img.width and y + h <= img.height
            assert (c.pixels.width, c.pixels.height) == (w, h)



class TestUnify:
    def setup_method(self):
        self.img = ImageGrid(np.random.default_rng(0).uniform(size=(4, 4, 1)))

    def test_valid(self):
        coarse = coarse_decompose(self.img, (2, 2))
        fine, _ = fine_decompose(self.img, local_saliency(self.img, 2), 1, (2, 2))
        vs = unify(self.img, coarse, fine)
        assert vs.original == self.img
        assert list(vs.coarse) == coarse and list(vs.fine) == fine

    def test_overlap_rejected(self):
        whole = coarse_decompose(self.img, (1, 1))[0]
        with pytest.raises(ViewError, match="overlap"):
            unify(self.img, [whole, whole], [])

    def test_gap_rejected(self):
        patches = coarse_decompose(self.img, (2, 2))[:3]
        with pytest.raises(ViewError, match="cover"):
            unify(self.img, patches, [])

    def test_empty_fine_allowed(self):
        vs = unify(self.img, coarse_decompose(self.img, (2, 2)), [])
        assert vs.fine == ()

    def test_bad_crop(self):
        bad = CropView((3, 3, 2, 2), ImageGrid(np.zeros((2, 2))), 0.0)
        with pytest.raises(ViewError):
            unify(self.img, coarse_decompose(self.img, (1, 1)), [bad])

    def test_patch_region_bounds(self):
        bad = Patch((0, 0, 5, 5), ImageGrid(np.zeros((1, 1))))
        with pytest.raises(ViewError):
            unify(self.img, [bad], [])


class TestDecompose:
    def test_defaults(self):
        img = ImageGrid(np.random.default_rng(1).uniform(size=(16, 16, 3)))
        vs = decompose(img)
        assert len(vs.coarse) == 4
        assert len(vs.fine) == 2
        assert all(c.region[2:] == (4, 4) for c in vs.fine)

    def test_no_fine(self):
        img = ImageGrid(np.zeros((8, 8)))
        assert decompose(img, ViewParams(m=0)).fine == ()

    def test_deterministic(self):
        img = ImageGrid(np.random.default_rng(2).uniform(size=(12, 12, 2)))
        a, b = decompose(img), decompose(img)
        assert a == b
