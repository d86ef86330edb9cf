import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rirfield.fields import (FieldConfig, InrasField, LossConfig, NafField, RirSet, TrainSchedule,
                             build_field, decay_curve, loss_decay, loss_naf, loss_stft_multires,
                             predict, relative_distances, sample_bounce_points, total_loss, train)
from rirfield.fields.losses import (DEFAULT_LAMBDA, MULTIRES_FFT, MULTIRES_HOP, MULTIRES_WIN,
                                    FloorWarning, stft_mag_cfg)
from rirfield.fields.naf import trilinear_weights
from rirfield.fields.train import naf_targets
from rirfield.nn import save_checkpoint
from rirfield.roomsim import (ClampWarning, ShoeboxRoom, SimConfig, generate_dataset,
                              random_positions)
from rirfield.signal import StftConfig, Waveform, stft_magnitude

ROOM = ShoeboxRoom.uniform((6, 4, 3), 0.35)


def small_set(n_src=2, n_rcv=16, orient=1, length=0.128, seed=0):
    src = random_positions(ROOM, n_src, seed=seed)
    rcv = random_positions(ROOM, n_rcv, seed=seed + 1)
    recs = generate_dataset(ROOM, src, rcv, orient, SimConfig(16000, length), yaw0=0.3)
    return RirSet.from_records(recs)


class TestBounce:
    def test_default_on_faces(self):
        bp = sample_bounce_points(ROOM, 256, seed=0)
        p = bp.points
        assert p.shape == (256, 3)
        dims = np.asarray(ROOM.dims)
        on_face = np.isclose(p, 0).any(1) | np.isclose(p, dims).any(1)
        assert on_face.all()
        assert np.all((p >= -1e-12) & (p <= dims + 1e-12))
        d = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(256) * 1e9
        assert d.min() > 0
        assert d.min() >= bp.radius - 1e-12

    def test_normals_point_inward(self):
        bp = sample_bounce_points(ROOM, 64, seed=1)
        centre = np.asarray(ROOM.dims) / 2
        assert np.all(np.sum((centre - bp.points) * bp.normals, axis=1) > 0)

    def test_2d_height(self):
        bp = sample_bounce_points(ROOM, 64, seed=0, mode="2d", height=1.5)
        assert np.all(bp.points[:, 2] == 1.5)

    def test_deterministic(self):
        a = sample_bounce_points(ROOM, 128, seed=3)
        b = sample_bounce_points(ROOM, 128, seed=3)
        c = sample_bounce_points(ROOM, 128, seed=4)
        assert np.array_equal(a.points, b.points) and not np.array_equal(a.points, c.points)

    def test_radius_shrinks(self):
        with pytest.warns(ClampWarning):
            bp = sample_bounce_points(ROOM, 50, seed=0, radius=5.0)
        assert len(bp) == 50 and bp.radius < 5.0

    def test_bad_n(self):
        with pytest.raises(ValueError):
            sample_bounce_points(ROOM, 0)

    def test_relative_distances(self):
        pts = np.array([[0.0, 1.0, 2.0], [6.0, 0.5, 1.0], [3.0, 4.0, 0.0]])
        p = np.array([1.0, 2.0, 0.5])
        d = relative_distances(p, pts)
        np.testing.assert_array_equal(d, [[1.0, 1.0, -1.5], [-5.0, 1.5, -0.5], [-2.0, -2.0, 0.5]])
        assert np.array_equal(relative_distances(pts[0], pts)[0], np.zeros(3))
        v = np.array([0.25, -0.5, 0.125])
        np.testing.assert_allclose(relative_distances(p + v, pts), d + v, atol=1e-15)


class TestNaf:
    def field(self, **kw):
        torch.manual_seed(0)
        return NafField((6, 4, 3), 257, 39, cells=(4, 4, 2), features=8, hidden=32, depth=2, **kw)

    def test_full_shape(self):
        m = self.field()
        out = m(torch.rand(3, 3) * 2, torch.rand(3, 3) * 2, torch.zeros(3, 2))
        assert out.shape == (3, 257, 39)

    def test_points_match_full(self):
        m = self.field()
        s, r, th = torch.tensor([[1.0, 1.0, 1.0]]), torch.tensor([[4.0, 2.0, 1.5]]), torch.zeros(1, 2)
        full = m(s, r, th)
        k = torch.tensor([[0, 5, 38]])
        f = torch.tensor([[0, 100, 256]])
        pts = m(s, r, th, k, f)
        torch.testing.assert_close(pts[0], full[0, f[0], k[0]])

    def test_lattice_node_identity(self):
        m = self.field()
        # lattice node (2, 1, 1) sits at (3.0, 1.0, 1.5) in a 6x4x3 room with 4x4x2 cells
        feat = m.grid_features(torch.tensor([3.0, 1.0, 1.5]))
        torch.testing.assert_close(feat, m.grid[2, 1, 1])

    def test_cell_centre_weights(self):
        _, w = trilinear_weights(torch.tensor([[1.5, 0.5, 1.5]]), (4, 4, 2))
        torch.testing.assert_close(w, torch.full((1, 8), 0.125))

    def test_weights_partition_of_unity(self):
        u = torch.rand(50, 3) * torch.tensor([4.0, 4.0, 2.0])
        _, w = trilinear_weights(u, (4, 4, 2))
        torch.testing.assert_close(w.sum(-1), torch.ones(50))
        assert (w >= 0).all()

    def test_clamp_warns(self):
        m = self.field()
        with pytest.warns(ClampWarning):
            inside = m.grid_features(torch.tensor([6.0, 4.0, 3.0]))
            outside = m.grid_features(torch.tensor([7.5, 4.2, 3.9]))
        assert m.clamped
        torch.testing.assert_close(inside, outside)

    def test_orientation_required(self):
        with pytest.raises(ValueError):
            self.field()(torch.ones(1, 3), torch.ones(1, 3))
        m = self.field(use_orientation=False)
        assert m(torch.ones(1, 3), torch.ones(1, 3)).shape == (1, 257, 39)


def dyadic_points(n=16):
    g = np.random.default_rng(0)
    # multiples of 1/8 keep every translated difference exact in float32
    return np.round(g.random((n, 3)) * np.array([6, 4, 3]) * 8) / 8


class TestInras:
    def field(self, points=None, origin=(0.0, 0.0, 0.0), n_samples=5120, **kw):
        torch.manual_seed(0)
        pts = dyadic_points() if points is None else points
        return InrasField(pts, n_samples, origin, room_scale=6.0, dim=16, enc_width=16,
                          dec_width=32, **kw)

    def test_length(self):
        m = self.field()
        out = m(torch.tensor([[1.0, 1.0, 1.0]]), torch.tensor([[3.0, 2.0, 1.5]]), torch.zeros(1, 2))
        assert out.shape == (1, 5120)
        assert m(torch.tensor([1.0, 1.0, 1.0]), torch.tensor([3.0, 2.0, 1.5]), torch.zeros(2)).shape == (5120,)

    def test_orientation_matters(self):
        m = self.field()
        s, r = torch.tensor([[1.0, 1.0, 1.0]]), torch.tensor([[3.0, 2.0, 1.5]])
        a = m(s, r, torch.tensor([[0.0, 0.0]]))
        b = m(s, r, torch.tensor([[2.0, 0.0]]))
        assert not torch.equal(a, b)

    def test_no_orientation_ignores_theta(self):
        m = self.field(use_orientation=False)
        s, r = torch.tensor([[1.0, 1.0, 1.0]]), torch.tensor([[3.0, 2.0, 1.5]])
        assert torch.equal(m(s, r, torch.tensor([[0.0, 0.0]])), m(s, r, torch.tensor([[2.0, 0.0]])))
        assert m(s, r).shape == (1, 5120)

    def test_deterministic(self):
        m = self.field()
        s, r, th = torch.rand(4, 3), torch.rand(4, 3), torch.rand(4, 2)
        assert torch.equal(m(s, r, th), m(s, r, th))

    def test_translation_consistency(self):
        v = np.array([2.0, -1.0, 0.5])
        pts = dyadic_points()
        a = self.field(pts)
        b = self.field(pts + v, origin=tuple(v))
        b.load_state_dict({k: t for k, t in a.state_dict().items() if k not in ("points", "origin")},
                          strict=False)
        s = torch.tensor([[1.25, 0.5, 1.0], [4.0, 3.5, 2.25]])
        r = torch.tensor([[3.0, 2.0, 1.5], [0.75, 1.0, 0.5]])
        th = torch.tensor([[0.3, 0.0], [1.0, 0.2]])
        vt = torch.as_tensor(v, dtype=torch.float32)
        assert torch.equal(a(s, r, th), b(s + vt, r + vt, th))

    def test_bounce_mismatch(self):
        m = self.field()
        with pytest.raises(ValueError, match="bounce set"):
            m(torch.ones(1, 3), torch.ones(1, 3), torch.zeros(1, 2), points=torch.zeros(10, 3))

    def test_block_multiple(self):
        with pytest.raises(ValueError):
            self.field(n_samples=5000)

    def test_mixing_matches_materialised(self):
        m = self.field()
        s, r = torch.tensor([1.0, 1.0, 1.0]), torch.tensor([3.0, 2.0, 1.5])
        S, R, B = m.per_point_features(s, r)
        assert S.shape == R.shape == B.shape == (16, 16)
        ds = s - m.points
        mixed = m.scatter.mixed(m._encode(ds), m.mix[0])
        torch.testing.assert_close(mixed, S.T @ m.mix[0], rtol=1e-5, atol=1e-5)


def hand_stft_mag(x, fft, win, hop):
    n = len(x)
    n_frames = 1 + max(0, math.ceil((n - win) / hop))
    x = np.pad(x, (0, (n_frames - 1) * hop + win - n))
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    cols = []
    for k in range(n_frames):
        frame = np.zeros(fft)
        frame[:win] = x[k * hop:k * hop + win] * w
        cols.append([abs(sum(frame[t] * np.exp(-2j * np.pi * f * t / fft) for t in range(fft)))
                     for f in range(fft // 2 + 1)])
    return np.array(cols).T


class TestLosses:
    def test_naf_identity_and_offset(self):
        a = torch.randn(2, 5, 4)
        assert loss_naf(a, a).item() == 0.0
        assert loss_naf(a + 0.75, a).item() == pytest.approx(0.75, rel=1e-6)

    def test_naf_hand_fold(self):
        g = np.random.default_rng(0)
        a, b = g.standard_normal((3, 7)), g.standard_normal((3, 7))
        expected = sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(7)) / 21
        assert loss_naf(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(expected, rel=1e-12)

    def test_naf_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_naf(torch.zeros(2, 3), torch.zeros(3, 2))

    def test_multires_identity(self):
        x = torch.randn(2, 4096, dtype=torch.float64)
        assert loss_stft_multires(x, x).item() == 0.0

    def test_default_table(self):
        assert MULTIRES_FFT == (128, 512, 1024, 2048)
        assert MULTIRES_WIN == (80, 240, 600, 1200)
        assert MULTIRES_HOP == (16, 50, 120, 240)

    def test_single_resolution_oracle(self):
        g = np.random.default_rng(1)
        gt = g.standard_normal(64)
        pred = gt + 0.3 * g.standard_normal(64)
        P, G = hand_stft_mag(pred, 32, 24, 8), hand_stft_mag(gt, 32, 24, 8)
        sc = np.sqrt(np.sum((P - G) ** 2)) / np.sqrt(np.sum(G ** 2))
        mag = np.mean(np.abs(np.log(P + 1e-6) - np.log(G + 1e-6)))
        got = loss_stft_multires(torch.tensor(pred), torch.tensor(gt), [(32, 24, 8)])
        assert got.item() == pytest.approx(sc + mag, rel=1e-9)

    def test_zero_energy_target_flags(self):
        pred = torch.randn(2, 2048, dtype=torch.float64)
        gt = torch.zeros(2, 2048, dtype=torch.float64)
        with pytest.warns(FloorWarning):
            sc, mag = loss_stft_multires(pred, gt, return_terms=True)
        assert sc.item() == 0.0 and mag.item() > 0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss_stft_multires(torch.zeros(100), torch.zeros(101))

    def test_decay_two_equal_frames(self):
        H = np.ones((5, 2))
        assert decay_curve(H)[0] == 2.0

    @pytest.mark.parametrize("ratio", [0.3, 0.5, 0.9])
    def test_decay_geometric(self, ratio):
        # column amplitudes sqrt(r^k) give frame energies E_0 r^k; a long tail keeps the sum geometric
        K = 400
        H = np.ones((3, K)) * np.sqrt(ratio ** np.arange(K))[None]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FloorWarning)
            D = decay_curve(H)
        # frames whose tail stays well above the 1e-10 relative floor
        n = min(50, int(np.log(1e-8) / np.log(ratio)))
        np.testing.assert_allclose(D[:n], 1 + (1 - ratio) / ratio, rtol=1e-9)

    def test_decay_scale_invariance(self):
        H = np.abs(np.random.default_rng(0).standard_normal((10, 6)))
        np.testing.assert_array_equal(decay_curve(H), decay_curve(H * 4.0))

    def test_decay_spectrogram_input(self):
        x = np.random.default_rng(0).standard_normal(2000) * np.exp(-np.arange(2000) / 300)
        S = stft_magnitude(Waveform(x, 16000), StftConfig(512, 256, 128))
        D = decay_curve(S)
        assert D.shape == (S.n_frames - 1,)

    def test_decay_tail_floor(self):
        H = np.zeros((4, 5))
        H[:, 0] = 1.0
        with pytest.warns(FloorWarning):
            D = decay_curve(H)
        assert np.all(np.isfinite(D))

    def test_decay_needs_two_frames(self):
        with pytest.raises(ValueError):
            decay_curve(np.ones((3, 1)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)),
                  elements=st.floats(0, 100)))
    def test_decay_at_least_one(self, H):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FloorWarning)
            if H.sum() == 0:
                return
            D = decay_curve(H)
        assert np.all(D >= 1.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(0.01, 10)), st.floats(1e-3, 1e3))
    def test_decay_scale_property(self, H, c):
        np.testing.assert_allclose(decay_curve(c * H), decay_curve(H), rtol=1e-12)

    def test_decay_loss_hand(self):
        # 1 frequency bin, 3 frames: energies (4, 1, 1) vs (1, 1, 1)
        pred = torch.tensor([[2.0, 1.0, 1.0]], dtype=torch.float64)
        gt = torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64)
        # D_pred = (1 + 4/2, 1 + 1/1) = (3, 2); D_gt = (1 + 1/2, 2) = (1.5, 2)
        expected = (abs(math.log(3) - math.log(1.5)) + 0.0) / 2
        assert loss_decay(pred, gt).item() == pytest.approx(expected, rel=1e-12)

    def test_decay_loss_slower_is_positive(self):
        k = np.arange(20)
        gt = torch.tensor(np.exp(-k / 3.0)[None].repeat(4, 0))
        pred = torch.tensor(np.exp(-k / 6.0)[None].repeat(4, 0))
        assert loss_decay(pred, gt).item() > 0
        assert loss_decay(gt, gt).item() == 0.0

    def test_lambda_zero_reduces(self):
        g = torch.Generator().manual_seed(0)
        pred, gt = torch.randn(2, 4096, generator=g), torch.randn(2, 4096, generator=g)
        a = total_loss("inras++", pred, gt, LossConfig("inras++", 0.0))
        b = total_loss("inras", pred, gt, LossConfig("inras"))
        assert a.item() == b.item()

    def test_inras_pp_adds_decay(self):
        g = torch.Generator().manual_seed(0)
        pred, gt = torch.randn(2, 4096, generator=g), torch.randn(2, 4096, generator=g)
        cfg = LossConfig("inras++")
        base = total_loss("inras", pred, gt, LossConfig("inras"))
        dec = loss_decay(stft_mag_cfg(pred, cfg.stft), stft_mag_cfg(gt, cfg.stft))
        assert total_loss("inras++", pred, gt, cfg).item() == pytest.approx((base + 2.0 * dec).item(), rel=1e-6)

    def test_defaults(self):
        assert DEFAULT_LAMBDA["naf++"] == 1.0 and DEFAULT_LAMBDA["inras++"] == 2.0
        assert LossConfig("naf++").lam == 1.0 and LossConfig("inras++").lam == 2.0
        for lam in (1.0, 2.0, 3.0, 5.0):
            assert LossConfig("inras++", lam).lam == lam

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig("nacf")
        with pytest.raises(ValueError):
            LossConfig("inras++", -1.0)
        with pytest.raises(ValueError):
            LossConfig("inras", multires=[])

    def test_domain_mismatch(self):
        with pytest.raises(ValueError):
            total_loss("naf", torch.zeros(2, 100), torch.zeros(2, 100), LossConfig("naf"))
        with pytest.raises(ValueError):
            total_loss("inras", torch.zeros(2, 5, 4), torch.zeros(2, 5, 4), LossConfig("inras"))
        with pytest.raises(ValueError):
            total_loss("inras", torch.zeros(2, 100), torch.zeros(2, 100), LossConfig("naf"))


def tiny_cfg(kind, **kw):
    return FieldConfig(kind=kind, n_bounce=32, dim=16, enc_width=16, dec_width=32, naf_cells=(4, 4, 2),
                       naf_features=8, naf_hidden=32, naf_depth=2, **kw)


@pytest.fixture(scope="module")
def data():
    return small_set()


class TestTraining:
    @pytest.mark.xfail(strict=True, reason="multi-resolution STFT loss plateaus at a 2-3x reduction in 200 epochs "
                                           "at reduced width (a single record reaches 15x in 1000 steps)")
    def test_overfit_inras_pp(self):
        data = small_set(2, 16, 1, length=0.128, seed=5)
        assert len(data) == 32
        fc = FieldConfig(kind="inras++", n_bounce=64, dim=32, enc_width=32, dec_width=128)
        model = build_field(fc, ROOM, data)
        res = train(model, data, TrainSchedule(epochs=200, batch_size=32, lr=3e-3, seed=0),
                    fc.loss_config(16000))
        losses = [h["train_loss"] for h in res.history]
        assert len(losses) == 200
        assert losses[0] / losses[-1] >= 100

    @pytest.mark.parametrize("kind", ["inras++", "naf++"])
    def test_identical_seeds_identical_checkpoints(self, data, kind, tmp_path):
        blobs = []
        for run in range(2):
            fc = tiny_cfg(kind, seed=3)
            m = build_field(fc, ROOM, data)
            train(m, data, TrainSchedule(epochs=2, batch_size=8, seed=3), fc.loss_config(16000))
            save_checkpoint(tmp_path / f"m{run}", m)
            blobs.append((tmp_path / f"m{run}.bin").read_bytes())
        assert blobs[0] == blobs[1]

    def test_holdout_fraction(self, data):
        fc = tiny_cfg("inras")
        m = build_field(fc, ROOM, data)
        res = train(m, data, TrainSchedule(epochs=2, batch_size=16, early_stop_holdout=0.10),
                    fc.loss_config(16000))
        assert len(res.holdout_ids) == round(0.10 * len(data))
        assert all("holdout_stft_error" in h for h in res.history)
        assert res.best_epoch is not None

    def test_empty_training_set(self, data):
        fc = tiny_cfg("inras")
        m = build_field(fc, ROOM, data)
        with pytest.raises(ValueError):
            train(m, data.subset([]), TrainSchedule(epochs=1), fc.loss_config(16000))

    def test_wrong_family(self, data):
        fc = tiny_cfg("inras")
        m = build_field(fc, ROOM, data)
        with pytest.raises(ValueError):
            train(m, data, TrainSchedule(epochs=1), LossConfig("naf"))

    @pytest.mark.parametrize("kind", ["naf", "naf++", "inras", "inras++"])
    def test_every_parameter_gets_gradient(self, data, kind):
        fc = tiny_cfg(kind)
        m = build_field(fc, ROOM, data)
        cfg = fc.loss_config(16000)
        s = torch.as_tensor(data.sources[:4], dtype=torch.float32)
        r = torch.as_tensor(data.receivers[:4], dtype=torch.float32)
        th = torch.as_tensor(data.orientations[:4], dtype=torch.float32) + torch.tensor([[0.4, 0.1]])
        gt = torch.from_numpy(data.waveforms[:4])
        if kind.startswith("naf"):
            tgt = naf_targets(data.subset(range(4)), cfg.stft)
            loss = total_loss(kind, m(s, r, th), tgt, cfg)
        else:
            loss = total_loss(kind, m(s, r, th), gt, cfg)
        loss.backward()
        for name, p in m.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name

    def test_naf_reconstruction(self, data):
        fc = tiny_cfg("naf")
        m = build_field(fc, ROOM, data)
        train(m, data, TrainSchedule(epochs=2, batch_size=16), fc.loss_config(16000))
        stft = StftConfig.for_sample_rate(16000)
        with torch.no_grad():
            mag = (torch.exp(m(torch.as_tensor(data.sources[:1], dtype=torch.float32),
                               torch.as_tensor(data.receivers[:1], dtype=torch.float32),
                               torch.as_tensor(data.orientations[:1], dtype=torch.float32)))
                   - 1e-6).clamp_min(0)[0].double().numpy()
        w = predict(m, data.subset([0]), seed=2)[0]
        back = stft_magnitude(Waveform(w, 16000), stft).magnitude[:, :mag.shape[1]]
        rel = np.linalg.norm(back - mag) / np.linalg.norm(mag)
        assert rel < 0.25

    def test_predict_inras_matches_forward(self, data):
        fc = tiny_cfg("inras")
        m = build_field(fc, ROOM, data)
        out = predict(m, data.subset([0, 1]))
        with torch.no_grad():
            ref = m(torch.as_tensor(data.sources[:2], dtype=torch.float32),
                    torch.as_tensor(data.receivers[:2], dtype=torch.float32),
                    torch.as_tensor(data.orientations[:2], dtype=torch.float32)).numpy()
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    def test_output_scale_is_training_rms(self, data):
        m = build_field(tiny_cfg("inras"), ROOM, data)
        assert m.output_scale.item() == pytest.approx(
            float(np.sqrt(np.mean(data.waveforms.astype(np.float64) ** 2))), rel=1e-6)
