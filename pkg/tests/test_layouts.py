import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedleak import layouts
from fedleak.layouts import BLOB, COARSE, FINE, TRACE
from fedleak.postproc import dice


def test_determinism():
    a = layouts.gen_mask(TRACE, FINE, 32, 11)
    b = layouts.gen_mask(TRACE, FINE, 32, 11)
    assert np.array_equal(a.grid, b.grid)


def test_feature_widths():
    assert layouts.feature_width(FINE, 32) == 1
    assert layouts.feature_width(COARSE, 32) == 2
    assert layouts.feature_width(FINE, 256) == 8
    assert layouts.feature_width(COARSE, 16) == 2


def _runs(grid):
    """Horizontal runs of foreground per row: list of (row, start, stop)."""
    out = []
    for r, row in enumerate(grid):
        padded = np.concatenate([[0], row, [0]])
        d = np.diff(padded.astype(int))
        out += [(r, s, e) for s, e in zip(np.nonzero(d == 1)[0], np.nonzero(d == -1)[0])]
    return out


@pytest.mark.parametrize("size", [16, 32, 64])
@pytest.mark.parametrize("scale", [FINE, COARSE])
def test_trace_geometry(scale, size):
    w = layouts.feature_width(scale, size)
    for seed in range(30):
        g = layouts.gen_mask(TRACE, scale, size, seed).grid
        rows = np.nonzero(g.any(axis=1))[0]
        # strips are exactly w rows tall and separated by empty rows
        bands = np.split(rows, np.nonzero(np.diff(rows) > 1)[0] + 1)
        assert 3 <= len(bands) <= 8
        assert all(len(b) == w for b in bands)
        for b in bands:
            assert (g[b] == g[b[0]]).all()  # a strip is a full rectangle
            assert len(_runs(g[b[:1]])) == 1


@pytest.mark.parametrize("size", [16, 32, 64])
@pytest.mark.parametrize("scale", [FINE, COARSE])
def test_blob_geometry(scale, size):
    w = layouts.feature_width(scale, size)
    for seed in range(30):
        g = layouts.gen_mask(BLOB, scale, size, seed).grid
        # every foreground run is at least 4w long (rectangles of side >= 4w)
        assert min(e - s for _, s, e in _runs(g)) >= 4 * w
        assert min(e - s for _, s, e in _runs(g.T)) >= 4 * w


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(layouts.CLASSES),
    st.sampled_from(layouts.SCALES),
    st.sampled_from([16, 32, 64]),
    st.integers(0, 2**32 - 1),
)
def test_foreground_fraction_invariant(cls, scale, size, seed):
    m = layouts.gen_mask(cls, scale, size, seed)
    assert 0.05 <= m.foreground_fraction() <= 0.80
    assert set(np.unique(m.grid)) <= {0, 1}
    assert m.grid.shape == (size, size)


def test_gen_mask_errors():
    with pytest.raises(ValueError):
        layouts.gen_mask(TRACE, FINE, 8, 0)
    with pytest.raises(ValueError):
        layouts.gen_mask("VIA", FINE, 32, 0)


def test_sem_params_validation():
    with pytest.raises(ValueError):
        layouts.SemParams(background_mean=140.0)
    with pytest.raises(ValueError):
        layouts.SemParams(noise_std=0.0)
    with pytest.raises(ValueError):
        layouts.SemParams(foreground_mean=300.0)


def test_background_mean_within_clt_bound():
    mask = layouts.LayoutMask(np.zeros((40, 40), np.uint8), TRACE, FINE)
    n = mask.grid.size
    bound = 3 * (20 / 255) / np.sqrt(n)
    for seed in range(10):
        img = layouts.render_sem(mask, seed=seed).pixels
        assert abs(img.mean() - 75 / 255) <= bound


def test_noiseless_limit_is_two_level():
    m = layouts.gen_mask(BLOB, COARSE, 32, 0)
    p = layouts.SemParams(noise_std=1e-12, shot_noise_factor=1e30)
    img = layouts.render_sem(m, p, seed=3).pixels
    np.testing.assert_array_equal(img, np.where(m.grid == 1, 135 / 255, 75 / 255))


def test_render_determinism_and_range():
    m = layouts.gen_mask(TRACE, COARSE, 32, 1)
    a, b = layouts.render_sem(m, seed=9).pixels, layouts.render_sem(m, seed=9).pixels
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def _expected_pixel(base, params):
    # E[clip(base + N(0, std^2 + base/shot), 0, 255)] by quadrature
    z = np.linspace(-12, 12, 48001)
    pdf = np.exp(-0.5 * z * z)
    pdf /= pdf.sum()
    sd = np.sqrt(params.noise_std**2 + base / params.shot_noise_factor)
    return float((np.clip(base + sd * z, 0, 255) * pdf).sum())


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 254), st.floats(0.5, 255), st.floats(0.1, 80), st.floats(0.5, 1000),
)
def test_rendering_is_monotone_in_expectation(bg, gap, std, shot):
    fg = min(bg + gap, 255.0)
    if fg <= bg:
        return
    p = layouts.SemParams(bg, fg, std, shot)
    assert _expected_pixel(fg, p) > _expected_pixel(bg, p)


def test_trace_and_blob_are_structurally_separable():
    rng = np.random.default_rng(0)
    for scale in layouts.SCALES:
        cross, same = [], []
        for i in range(50):
            s1, s2, s3 = (int(v) for v in rng.integers(0, 2**31, 3))
            t1 = layouts.gen_mask(TRACE, scale, 32, s1).grid
            t2 = layouts.gen_mask(TRACE, scale, 32, s2).grid
            b = layouts.gen_mask(BLOB, scale, 32, s3).grid
            cross.append(dice(t1, b).score)
            same.append(dice(t1, t2).score)
        assert np.mean(cross) < np.mean(same), scale


def test_build_dataset_files_and_round_trip(tmp_path):
    manifest = layouts.build_dataset({(TRACE, FINE): 2}, 32, 5, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == [
        "trace_fine_0000_image.pgm", "trace_fine_0000_mask.pgm",
        "trace_fine_0001_image.pgm", "trace_fine_0001_mask.pgm",
    ]
    lines = manifest.read_text().splitlines()
    assert lines[0] == "cell_id,class,scale,image,mask" and len(lines) == 3
    back = layouts.load_dataset(manifest)
    ref = layouts.generate({(TRACE, FINE): 2}, 32, 5)
    for (a, am), (b, bm) in zip(zip(back.images, back.masks), zip(ref.images, ref.masks)):
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(am.grid, bm.grid)
        assert (am.cls, am.scale, am.cell_id) == (bm.cls, bm.scale, bm.cell_id)


def test_build_dataset_is_byte_identical(tmp_path):
    a = layouts.build_dataset({(BLOB, COARSE): 2}, 32, 1, tmp_path / "a")
    b = layouts.build_dataset({(BLOB, COARSE): 2}, 32, 1, tmp_path / "b")
    for f in a.parent.iterdir():
        assert f.read_bytes() == (b.parent / f.name).read_bytes()


def test_different_seeds_give_different_masks():
    a = layouts.generate({(BLOB, FINE): 3}, 32, 1)
    b = layouts.generate({(BLOB, FINE): 3}, 32, 2)
    for ma, mb in zip(a.masks, b.masks):
        assert (ma.grid != mb.grid).sum() > 0


def test_build_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        layouts.build_dataset({(TRACE, FINE): 0}, 32, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        layouts.build_dataset({(TRACE, FINE): 1}, 32, 0, blocker / "sub")


def test_load_dataset_bad_manifest(tmp_path):
    p = tmp_path / "manifest.csv"
    p.write_text("id,cls\n")
    with pytest.raises(ValueError, match="manifest.csv"):
        layouts.load_dataset(p)
