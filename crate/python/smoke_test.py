"""Smoke test for the dualarb_py extension.

Build and install first:
    pip install -e crates/py --no-build-isolation
"""

import math
import tempfile

import dualarb_py as da


def main():
    tar, ref = da.phantom(7, 48, 48)
    assert len(tar) == 48 and len(tar[0]) == 48
    assert all(0.0 <= v <= 1.0 for row in tar for v in row)

    lr = da.degrade(tar, 2.0)
    assert (len(lr), len(lr[0])) == (24, 24)
    flat = [[0.3] * 24 for _ in range(24)]
    assert all(abs(v - 0.3) < 1e-9 for row in da.degrade(flat, 3.0) for v in row)

    mask = da.frequency_mask((48, 48), (24, 24))
    assert sum(map(sum, mask)) == 24 * 24

    assert da.psnr(tar, tar) == math.inf
    off = [[v + 0.1 for v in row] for row in tar]
    assert abs(da.psnr(off, tar) - 20.0) < 1e-9
    assert abs(da.ssim(tar, tar) - 1.0) < 1e-12
    c = 0.25
    dc = [[v + c for v in row] for row in tar]
    assert abs(da.k_loss(dc, tar, (24, 24)) - c * 48) < 1e-9

    assert da.curriculum_stage((10, 40, 150), 95) == ("full-training", 5e-5)

    model = da.Model("tiny", seed=1)
    assert model.num_parameters > 0
    for scale, reference in [(2.5, ref), (1.3, lr), (4.0, ref)]:
        sr = model.super_resolve(lr, scale, reference)
        want = round(24 * scale)
        assert (len(sr), len(sr[0])) == (want, want), (scale, len(sr))
        assert all(math.isfinite(v) for row in sr for v in row)

    try:
        model.super_resolve(lr, 2.0)
        raise AssertionError("missing reference accepted")
    except ValueError:
        pass

    with tempfile.TemporaryDirectory() as d:
        counts = da.make_dataset(d, seed=1, subjects=3, slices=1, h=24, w=24)
        assert sum(counts) == 3
        s = da.load_slice(d + "/slices/sub000_00_tar")
        assert len(s) == 24

    print("python smoke test ok:", model)


if __name__ == "__main__":
    main()
