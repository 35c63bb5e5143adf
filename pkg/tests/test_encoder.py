import numpy as np
import pytest

from xdmmd import encoder, synthgen
from xdmmd.encoder import Conv2D, Dense, GlobalAvgPool, MaxPool2, ReLU
from xdmmd.errors import ArchError, CacheError, FormatError, IoError, LayerError, ShapeError
from xdmmd.synthgen import ShapeKind, ShapeSpec

# recorded once from build_random(42) on the centered a=b=8 square, after the
# finite-difference checks below passed
GOLDEN_SQUARE_42 = [
    -0.10060975314186466, -0.06342349571183906, -0.12700813328844304, 0.04680374008723684,
    -0.08996955125286912, -0.012173870194416066, 0.08940795074302976, -0.03162205921824555,
    -0.09326183295261001, 0.09619724382107389,
]  # fmt: skip


def square_image():
    return synthgen.render_shape(ShapeSpec(ShapeKind.SQUARE, 32, 32, 8, 8))


def downstream_signature(model, position, activation):
    """ReLU masks and pool winners after ``position``; FD is exact while these hold."""
    sig = []
    h = activation
    for layer, ps in zip(model.layers[position + 1 :], model.params[position + 1 :]):
        if isinstance(layer, ReLU):
            sig.append(h > 0)
        elif isinstance(layer, MaxPool2):
            sig.append(np.argmax(encoder._pool_windows(h), axis=-1))
        h = encoder._apply(layer, ps, h)
    return sig


def same_signature(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def fd_check(model, image, layer_index, g_emb, rng, count, eps=1e-4):
    """Compare backward_to_layer with central differences on random entries.

    Entries whose +-eps step flips a downstream ReLU or pool winner are
    skipped: the network is piecewise linear and the derivative is undefined
    across a kink. Returns (checked, worst relative error).
    """
    _, cache = encoder.forward(model, image, keep_cache=True)
    G = encoder.backward_to_layer(model, cache, g_emb, layer_index)
    pos = encoder.activation_position(model, layer_index)
    A = cache.outputs[pos]
    base_sig = downstream_signature(model, pos, A)
    checked, worst = 0, 0.0
    for flat in rng.choice(A.size, size=count, replace=False):
        idx = np.unravel_index(flat, A.shape)
        plus, minus = A.copy(), A.copy()
        plus[idx] += eps
        minus[idx] -= eps
        if not (same_signature(base_sig, downstream_signature(model, pos, plus))
                and same_signature(base_sig, downstream_signature(model, pos, minus))):
            continue
        fd = (g_emb @ encoder.forward_from(model, pos, plus) - g_emb @ encoder.forward_from(model, pos, minus)) / (2 * eps)
        diff = abs(fd - G[idx])
        if diff > 1e-8:
            worst = max(worst, diff / max(abs(fd), abs(G[idx])))
        checked += 1
    return checked, worst


class TestArchitecture:
    def test_default_shapes(self):
        m = encoder.build_random(0)
        assert m.shapes[6] == (32, 16, 16)
        assert m.shapes[7] == (32, 16, 16)
        assert m.conv_indices == [0, 3, 6]
        assert m.embed_dim == 10

    def test_bad_composition(self):
        with pytest.raises(ArchError):
            encoder.build_random(0, (Conv2D(1, 4), ReLU(), Conv2D(8, 4), GlobalAvgPool(), Dense(4, 2)))
        with pytest.raises(ArchError):
            encoder.build_random(0, (Conv2D(1, 4), MaxPool2()), (1, 6, 6))
        with pytest.raises(ArchError):
            encoder.build_random(0, (Conv2D(1, 4), MaxPool2()), (1, 5, 5))

    def test_seeded_weights(self):
        a, b = encoder.build_random(7), encoder.build_random(7)
        for pa, pb in zip(a.params, b.params):
            for x, y in zip(pa, pb):
                assert x.tobytes() == y.tobytes()
        assert a.fingerprint == b.fingerprint != encoder.build_random(8).fingerprint

    def test_weight_bounds(self):
        m = encoder.build_random(3)
        w = m.params[3][0]
        assert np.abs(w).max() <= np.sqrt(6 / (8 * 9))
        assert not m.params[3][1].any()


class TestForward:
    def test_zero_model(self, rng):
        e, _ = encoder.forward(encoder.zero_model(), rng.uniform(size=(64, 64)))
        np.testing.assert_array_equal(e, np.zeros(10))

    def test_blank_image(self):
        e, _ = encoder.forward(encoder.build_random(5), np.zeros((64, 64)))
        np.testing.assert_array_equal(e, np.zeros(10))

    def test_cache_is_observational(self, rng):
        m = encoder.build_random(2)
        img = rng.uniform(size=(64, 64))
        a, none = encoder.forward(m, img)
        b, cache = encoder.forward(m, img, keep_cache=True)
        assert none is None
        assert a.tobytes() == b.tobytes()
        assert len(cache.outputs) == len(m.layers)

    def test_golden(self):
        e, _ = encoder.forward(encoder.build_random(42), square_image())
        np.testing.assert_allclose(e, GOLDEN_SQUARE_42, rtol=0, atol=1e-12)

    def test_conv_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.empty((3, 5, 6))
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    ref[o, i, j] = np.sum(w[o] * xp[:, i : i + 3, j : j + 3]) + b[o]
        np.testing.assert_allclose(encoder._conv_forward(x, w, b), ref, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            encoder.forward(encoder.build_random(0), np.zeros((32, 32)))


class TestBackward:
    def test_zero_gradient(self, rng):
        m = encoder.build_random(1)
        _, cache = encoder.forward(m, rng.uniform(size=(64, 64)), keep_cache=True)
        G = encoder.backward_to_layer(m, cache, np.zeros(10), 3)
        assert G.shape == (16, 32, 32) and not G.any()

    def test_linear_in_upstream_gradient(self, rng):
        m = encoder.build_random(1)
        _, cache = encoder.forward(m, rng.uniform(size=(64, 64)), keep_cache=True)
        g = rng.normal(size=10)
        a = encoder.backward_to_layer(m, cache, g, 6)
        np.testing.assert_allclose(encoder.backward_to_layer(m, cache, -2.5 * g, 6), -2.5 * a, rtol=1e-12, atol=1e-15)

    def test_pool_routes_one_entry_per_window(self):
        x = np.array([[[1.0, 3.0], [3.0, 0.0]]])
        g = encoder._pool_backward(np.array([[[5.0]]]), x)
        # tie between the two 3s goes to the first in row-major order
        np.testing.assert_array_equal(g, [[[0.0, 5.0], [0.0, 0.0]]])

    def test_pool_backward_counts(self, rng):
        x = rng.normal(size=(4, 8, 8))
        g = encoder._pool_backward(np.ones((4, 4, 4)), x)
        win = encoder._pool_windows(g)
        assert np.all((win != 0).sum(axis=-1) == 1)

    def test_finite_differences(self):
        rng = np.random.default_rng(99)
        total, worst = 0, 0.0
        for pair in range(6):
            m = encoder.build_random(1000 + pair)
            if pair % 2:
                spec = synthgen.sample_spec(ShapeKind.ELLIPSE, rng)
                img = synthgen.render_shape(spec).pixels
            else:
                img = rng.uniform(size=(64, 64))
            for layer in m.conv_indices:
                checked, err = fd_check(m, img, layer, rng.normal(size=10), rng, count=25)
                total += checked
                worst = max(worst, err)
        assert total >= 200
        assert worst < 1e-4

    def test_unknown_layer(self, rng):
        m = encoder.build_random(0)
        _, cache = encoder.forward(m, rng.uniform(size=(64, 64)), keep_cache=True)
        with pytest.raises(LayerError):
            encoder.backward_to_layer(m, cache, np.ones(10), 1)
        with pytest.raises(LayerError):
            encoder.resolve_layer(m, "middle")

    def test_stale_cache(self, rng):
        _, cache = encoder.forward(encoder.build_random(0), rng.uniform(size=(64, 64)), keep_cache=True)
        with pytest.raises(CacheError):
            encoder.backward_to_layer(encoder.build_random(1), cache, np.ones(10), 6)

    def test_resolve(self):
        m = encoder.build_random(0)
        assert encoder.resolve_layer(m, "final") == 6
        assert encoder.resolve_layer(m, "penultimate") == 3
        assert encoder.resolve_layer(m, "0") == 0


class TestModelFile:
    def test_round_trip(self, tmp_path):
        m = encoder.build_random(42)
        encoder.save_model(m, tmp_path / "m.dmex")
        back = encoder.load_model(tmp_path / "m.dmex")
        assert back.layers == m.layers and back.seed == 42
        assert back.fingerprint == m.fingerprint
        for pa, pb in zip(m.params, back.params):
            for x, y in zip(pa, pb):
                assert x.tobytes() == y.tobytes()
        encoder.save_model(back, tmp_path / "again.dmex")
        assert (tmp_path / "m.dmex").read_bytes() == (tmp_path / "again.dmex").read_bytes()

    def test_bad_magic(self, tmp_path):
        encoder.save_model(encoder.build_random(0), tmp_path / "m.dmex")
        data = bytearray((tmp_path / "m.dmex").read_bytes())
        data[:4] = b"NOPE"
        (tmp_path / "m.dmex").write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            encoder.load_model(tmp_path / "m.dmex")

    def test_future_version(self, tmp_path):
        encoder.save_model(encoder.build_random(0), tmp_path / "m.dmex")
        data = bytearray((tmp_path / "m.dmex").read_bytes())
        data[4:8] = (7).to_bytes(4, "little")
        (tmp_path / "m.dmex").write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version 7"):
            encoder.load_model(tmp_path / "m.dmex")

    @pytest.mark.parametrize("cut", [3, 20, 100, 1])
    def test_truncated(self, tmp_path, cut):
        encoder.save_model(encoder.build_random(0), tmp_path / "m.dmex")
        data = (tmp_path / "m.dmex").read_bytes()
        (tmp_path / "m.dmex").write_bytes(data[: len(data) - cut] if cut > 3 else data[:cut])
        with pytest.raises(FormatError):
            encoder.load_model(tmp_path / "m.dmex")

    def test_trailing_bytes(self, tmp_path):
        encoder.save_model(encoder.build_random(0), tmp_path / "m.dmex")
        with open(tmp_path / "m.dmex", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError):
            encoder.load_model(tmp_path / "m.dmex")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            encoder.load_model(tmp_path / "absent.dmex")


class TestDatasets:
    def test_embed_dataset(self, tmp_path):
        images, manifest = synthgen.generate_two_groups({"square": 200}, {"square": 40, "ellipse": 160}, seed=3)
        synthgen.write_images(images, manifest, tmp_path)
        emb = encoder.embed_dataset(encoder.build_random(3), manifest, tmp_path, threads=4)
        assert emb.vectors.shape == (400, 10)
        assert emb.ids == tuple(e.id for e in manifest.entries)

    def test_order_preserved(self, tmp_path):
        images, manifest = synthgen.generate_two_groups({"square": 4}, {"ellipse": 4}, seed=1)
        synthgen.write_images(images, manifest, tmp_path)
        m = encoder.build_random(1)
        a = encoder.embed_dataset(m, manifest, tmp_path)
        rev = synthgen.GroupManifest(manifest.entries[::-1])
        b = encoder.embed_dataset(m, rev, tmp_path)
        assert b.ids == a.ids[::-1]
        assert b.vectors.tobytes() == a.vectors[::-1].tobytes()

    def test_empty_manifest(self):
        emb = encoder.embed_dataset(encoder.build_random(0), synthgen.GroupManifest([]))
        assert len(emb) == 0 and emb.dim == 10

    def test_unreadable_image_names_id(self, tmp_path):
        manifest = synthgen.GroupManifest([synthgen.ManifestEntry("Y0042", "Y", "ellipse", "missing.pgm")])
        with pytest.raises(IoError, match="Y0042"):
            encoder.embed_dataset(encoder.build_random(0), manifest, tmp_path)
