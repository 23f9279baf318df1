"""Triplet mining rules, loss values and gradients, pairing training,
persistence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trendgen.catalog import (
    Catalog,
    CatalogError,
    Division,
    AttributeVector,
    OutfitRecord,
    Product,
)
from trendgen.compat import (
    CompatModel,
    PairingKey,
    Triplet,
    build_triplets,
    co_occurrence,
    embed,
    load_compat,
    load_models,
    new_compat_model,
    positive_division_for,
    save_compat,
    save_models,
    train_pairing,
    triplet_loss,
    triplet_loss_fn,
    triplet_satisfaction,
    validate_triplet,
)
from trendgen.nn import (
    ACT_PRELU,
    ACT_LINEAR,
    DenseLayer,
    Mlp,
    TrainConfig,
    finite_diff_check,
    init_mlp,
)


def product(pid, division, *, img=None, txt=None, multicolor=False, seed=0):
    rng = np.random.default_rng(seed)
    return Product(
        product_id=pid,
        attributes=AttributeVector(
            division=Division.parse(division),
            category="x",
            color="multicolor" if multicolor else "blue",
            multicolor=multicolor,
        ),
        title=pid,
        image_uri=f"img://{pid}",
        image_embedding=(img if img is not None
                         else rng.standard_normal(512)).astype(np.float32),
        text_embedding=(txt if txt is not None
                        else rng.standard_normal(512)).astype(np.float32),
    )


def approved(oid, item_ids):
    return OutfitRecord(outfit_id=oid, item_ids=list(item_ids),
                        source="expert", verdict="approved")


class TestPairingKey:
    def test_same_division_rejected(self):
        with pytest.raises(ValueError, match="twice"):
            PairingKey(Division.TOPS, Division.TOPS)

    def test_parse(self):
        pk = PairingKey.parse("tops:bottoms")
        assert pk.anchor_division is Division.TOPS
        assert pk.target_division is Division.BOTTOMS
        assert str(pk) == "Tops:Bottoms"


class TestEmbed:
    def pairing(self):
        return PairingKey(Division.TOPS, Division.BOTTOMS)

    def test_zero_weights_zero_output(self):
        net = Mlp([DenseLayer(weights=np.zeros((512, 1024)), bias=np.zeros(512),
                              activation=ACT_PRELU)])
        model = CompatModel(pairing=self.pairing(), net=net)
        assert not embed(model, np.ones(1024)).any()

    def test_purity(self):
        model = new_compat_model(self.pairing(), seed=0)
        x = np.random.default_rng(1).standard_normal(1024)
        assert np.array_equal(embed(model, x), embed(model, x))

    def test_identity_padding_recovers_image_half(self):
        w = np.zeros((512, 1024))
        w[:, :512] = np.eye(512)
        net = Mlp([DenseLayer(weights=w, bias=np.zeros(512), activation=ACT_LINEAR)])
        model = CompatModel(pairing=self.pairing(), net=net)
        x = np.random.default_rng(2).standard_normal(1024)
        assert np.allclose(embed(model, x), x[:512])

    def test_dimension_mismatch(self):
        model = new_compat_model(self.pairing(), seed=0)
        with pytest.raises(ValueError):
            embed(model, np.zeros(100))

    def test_wrong_shape_net_rejected(self):
        net = Mlp([DenseLayer(weights=np.zeros((8, 16)), bias=np.zeros(8))])
        with pytest.raises(ValueError, match="1024"):
            CompatModel(pairing=self.pairing(), net=net)


class TestTripletLoss:
    def test_degenerate_equal_points(self):
        f = np.array([1.0, 2.0])
        assert triplet_loss(f, f, f, 0.3) == pytest.approx(0.3)

    def test_inactive_hinge(self):
        assert triplet_loss((0, 0), (1, 0), (0, 2), 0.5) == 0.0

    def test_active_hinge(self):
        assert triplet_loss((0, 0), (2, 0), (1, 0), 1.0) == pytest.approx(4.0)

    def test_batch_sums(self):
        f_a = np.zeros((2, 2))
        f_p = np.array([[2.0, 0.0], [1.0, 0.0]])
        f_n = np.array([[1.0, 0.0], [0.0, 2.0]])
        # rows: max(0, 4-1+1)=4 and max(0, 1-4+1)=0
        assert triplet_loss(f_a, f_p, f_n, 1.0) == pytest.approx(4.0)

    def test_nonnegative_always(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = triplet_loss(rng.standard_normal(4), rng.standard_normal(4),
                             rng.standard_normal(4), 0.2)
            assert v >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            triplet_loss(np.zeros(3), np.zeros(3), np.zeros(4), 0.2)

    def test_nonpositive_margin(self):
        with pytest.raises(ValueError, match="margin"):
            triplet_loss(np.zeros(3), np.zeros(3), np.zeros(3), 0.0)


class TestTripletGradients:
    def data(self, n=6, dim=10, seed=0):
        rng = np.random.default_rng(seed)
        return (rng.standard_normal((n, dim)), rng.standard_normal((n, dim)),
                rng.standard_normal((n, dim)))

    def test_gradcheck_mixed_active(self):
        net = init_mlp([10, 7], seed=0, output_activation=ACT_PRELU)
        A, P, N = self.data()
        err = finite_diff_check(net, triplet_loss_fn(A, P, N, 0.5), probes=40, seed=0)
        assert err < 1e-4

    def test_gradcheck_hinge_active_side(self):
        # Positive far from the anchor, negative right next to it: the term
        # is strictly positive, so the active branch carries real gradient.
        # Inputs stay away from zero so no PReLU unit sits on its kink.
        net = init_mlp([4, 3], seed=1, output_activation=ACT_PRELU)
        rng = np.random.default_rng(5)
        A = rng.standard_normal((1, 4))
        P = A + 3.0
        N = A + 0.01 * rng.standard_normal((1, 4))
        fn = triplet_loss_fn(A, P, N, 0.2)
        value, _ = fn(net)
        assert value > 0
        assert finite_diff_check(net, fn, probes=30, seed=0) < 1e-4

    def test_inactive_triplet_zero_gradient(self):
        net = init_mlp([4, 3], seed=1, output_activation=ACT_PRELU)
        # Positive at the anchor, negative far away: hinge strictly inactive
        # (term = 0 - big + 0.2 < 0), so every gradient is exactly zero.
        A = np.zeros((1, 4))
        N = np.full((1, 4), 5.0)
        value, grads = triplet_loss_fn(A, A.copy(), N, 0.2)(net)
        assert value == 0.0
        assert all(not w.any() for w in grads.weights)

    def test_corrupted_gradients_detected(self):
        net = init_mlp([10, 7], seed=0, output_activation=ACT_PRELU)
        A, P, N = self.data(seed=2)
        honest = triplet_loss_fn(A, P, N, 0.5)

        def doubled(m):
            value, grads = honest(m)
            return value, grads.scaled(2.0)

        assert abs(finite_diff_check(net, doubled, probes=40, seed=0) - 1.0) < 1e-3


class TestPositiveDivision:
    def test_fixed_rules(self):
        rng = np.random.default_rng(0)
        for d in (Division.BOTTOMS, Division.FOOTWEAR, Division.OUTERWEAR):
            assert all(positive_division_for(d, rng) is Division.TOPS
                       for _ in range(50))

    def test_accessories_split(self):
        rng = np.random.default_rng(42)
        draws = [positive_division_for(Division.ACCESSORIES, rng)
                 for _ in range(10_000)]
        assert set(draws) == {Division.TOPS, Division.BOTTOMS}
        frac_tops = draws.count(Division.TOPS) / len(draws)
        assert abs(frac_tops - 0.5) <= 0.02

    def test_tops_covers_other_four(self):
        rng = np.random.default_rng(42)
        draws = {positive_division_for(Division.TOPS, rng) for _ in range(10_000)}
        assert draws == {Division.BOTTOMS, Division.FOOTWEAR,
                         Division.OUTERWEAR, Division.ACCESSORIES}

    def test_never_own_division(self):
        rng = np.random.default_rng(1)
        for d in Division:
            assert all(positive_division_for(d, rng) is not d for _ in range(200))


class TestBuildTriplets:
    def test_tiny_catalog_exhaustive(self):
        cat = Catalog([
            product("top", "Tops"),
            product("bottom1", "Bottoms", seed=1),
            product("bottom2", "Bottoms", seed=2),
        ])
        outfits = [approved("o1", ["top", "bottom1"])]
        triplets, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS),
            per_anchor=4, rng=0)
        assert triplets == [Triplet("top", "bottom1", "bottom2")]
        assert report.triplets_emitted == 1

    def test_all_negatives_cooccur_reported(self):
        cat = Catalog([
            product("top", "Tops"),
            product("b1", "Bottoms", seed=1),
            product("b2", "Bottoms", seed=2),
        ])
        outfits = [approved("o1", ["top", "b1"]), approved("o2", ["top", "b2"])]
        triplets, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS), rng=0)
        assert triplets == []
        assert report.anchors_skipped_no_negatives == 1

    def test_anchor_without_positive_skipped(self):
        cat = Catalog([
            product("top1", "Tops"),
            product("top2", "Tops", seed=3),
            product("b1", "Bottoms", seed=1),
            product("b2", "Bottoms", seed=2),
        ])
        outfits = [approved("o1", ["top1", "b1"])]
        triplets, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS), rng=0)
        assert report.anchors_skipped_no_positive == 1
        assert {t.anchor_id for t in triplets} == {"top1"}

    def test_multicolor_anchor_forced_negative(self):
        cat = Catalog([
            product("top_mc", "Tops", multicolor=True),
            product("b_pos", "Bottoms", seed=1),
            product("b_solid", "Bottoms", seed=2),
            product("b_mc", "Bottoms", seed=3, multicolor=True),
        ])
        outfits = [approved("o1", ["top_mc", "b_pos"])]
        for seed in range(5):
            triplets, report = build_triplets(
                cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS),
                per_anchor=1, rng=seed)
            negs = {t.negative_id for t in triplets}
            assert "b_mc" in negs
        assert report.multicolor_anchors == 1

    def test_multicolor_unavailable_reported(self):
        cat = Catalog([
            product("top_mc", "Tops", multicolor=True),
            product("b_pos", "Bottoms", seed=1),
            product("b_solid", "Bottoms", seed=2),
        ])
        outfits = [approved("o1", ["top_mc", "b_pos"])]
        _, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS),
            per_anchor=1, rng=0)
        assert report.multicolor_negatives_unavailable == 1

    def test_rejected_outfits_ignored(self):
        cat = Catalog([
            product("top", "Tops"),
            product("b1", "Bottoms", seed=1),
            product("b2", "Bottoms", seed=2),
        ])
        outfits = [
            OutfitRecord(outfit_id="o1", item_ids=["top", "b1"], source="expert",
                         verdict="rejected", reason="coherence"),
        ]
        triplets, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS), rng=0)
        assert triplets == []
        assert report.anchors_skipped_no_positive == 1

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_emitted_triplets_always_valid(self, data):
        n_tops = data.draw(st.integers(2, 5))
        n_bottoms = data.draw(st.integers(2, 5))
        products = (
            [product(f"t{i}", "Tops", img=np.zeros(512), txt=np.zeros(512))
             for i in range(n_tops)]
            + [product(f"b{i}", "Bottoms", img=np.zeros(512), txt=np.zeros(512),
                       multicolor=data.draw(st.booleans()))
               for i in range(n_bottoms)]
        )
        cat = Catalog(products)
        n_outfits = data.draw(st.integers(1, 6))
        outfits = []
        for k in range(n_outfits):
            t = data.draw(st.integers(0, n_tops - 1))
            b = data.draw(st.integers(0, n_bottoms - 1))
            outfits.append(approved(f"o{k}", [f"t{t}", f"b{b}"]))
        per_anchor = data.draw(st.integers(1, 4))
        seed = data.draw(st.integers(0, 100))
        triplets, report = build_triplets(
            cat, outfits, PairingKey(Division.TOPS, Division.BOTTOMS),
            per_anchor=per_anchor, rng=seed)
        for t in triplets:
            validate_triplet(t, cat, outfits)
        assert report.triplets_emitted == len(triplets)

    def test_deterministic_given_seed(self):
        cat = Catalog(
            [product(f"t{i}", "Tops", seed=i) for i in range(4)]
            + [product(f"b{i}", "Bottoms", seed=10 + i) for i in range(6)]
        )
        outfits = [approved("o1", ["t0", "b0"]), approved("o2", ["t1", "b2"])]
        pk = PairingKey(Division.TOPS, Division.BOTTOMS)
        first, _ = build_triplets(cat, outfits, pk, per_anchor=3, rng=7)
        second, _ = build_triplets(cat, outfits, pk, per_anchor=3, rng=7)
        assert first == second


def grouped_training_fixture(n_per_group=5, seed=0):
    """Two style groups; every same-group (top, bottom) pair co-occurs in an
    approved outfit, so negatives are always cross-group. Group membership
    is written into disjoint embedding dimensions, so a linear map can
    separate them. Dense co-occurrence matters: with sparse outfits,
    same-group items would land in negative pools while being embedding-
    identical to positives, making those triplets unsatisfiable."""
    rng = np.random.default_rng(seed)
    products, outfits = [], []
    for g in range(2):
        for i in range(n_per_group):
            img = rng.standard_normal(512) * 0.1
            img[g] += 8.0
            txt = rng.standard_normal(512) * 0.1
            products.append(product(f"t{g}_{i}", "Tops", img=img, txt=txt))
            img_b = rng.standard_normal(512) * 0.1
            img_b[2 + g] += 8.0
            txt_b = rng.standard_normal(512) * 0.1
            products.append(product(f"b{g}_{i}", "Bottoms", img=img_b, txt=txt_b))
        for i in range(n_per_group):
            for j in range(n_per_group):
                outfits.append(approved(f"o{g}_{i}_{j}", [f"t{g}_{i}", f"b{g}_{j}"]))
    return Catalog(products), outfits


class TestTrainPairing:
    CFG = TrainConfig(learning_rate=0.001, epochs=5, batch_size=16, seed=11)

    def test_loss_decreases_and_separates(self):
        cat, outfits = grouped_training_fixture()
        pk = PairingKey(Division.BOTTOMS, Division.TOPS)
        model = train_pairing(cat, outfits, pk, self.CFG)
        assert model.epoch_losses[-1] < model.epoch_losses[0]
        triplets, _ = build_triplets(cat, outfits, pk, rng=123)
        assert triplet_satisfaction(model, cat, triplets) >= 0.9

    def test_zero_epochs_returns_init(self):
        cat, outfits = grouped_training_fixture()
        pk = PairingKey(Division.BOTTOMS, Division.TOPS)
        cfg = TrainConfig(learning_rate=0.001, epochs=0, batch_size=16, seed=11)
        a = train_pairing(cat, outfits, pk, cfg)
        b = train_pairing(cat, outfits, pk, cfg)
        assert a.epoch_losses == []
        assert a.net.layers[0].weights.tobytes() == b.net.layers[0].weights.tobytes()

    def test_same_seed_bitwise(self):
        cat, outfits = grouped_training_fixture()
        pk = PairingKey(Division.BOTTOMS, Division.TOPS)
        a = train_pairing(cat, outfits, pk, self.CFG)
        b = train_pairing(cat, outfits, pk, self.CFG)
        assert a.net.layers[0].weights.tobytes() == b.net.layers[0].weights.tobytes()
        assert a.net.layers[0].slopes.tobytes() == b.net.layers[0].slopes.tobytes()

    def test_no_triplets_rejected(self):
        cat = Catalog([product("t0", "Tops"), product("b0", "Bottoms", seed=1)])
        pk = PairingKey(Division.BOTTOMS, Division.TOPS)
        with pytest.raises(ValueError, match="no triplets"):
            train_pairing(cat, [], pk, self.CFG)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        model = new_compat_model(PairingKey(Division.TOPS, Division.BOTTOMS),
                                 seed=3, margin=0.35)
        p = tmp_path / "m.tgcm"
        save_compat(model, p)
        loaded = load_compat(p)
        assert loaded.pairing == model.pairing
        assert loaded.margin == pytest.approx(0.35)
        x = np.random.default_rng(0).standard_normal(1024)
        assert np.allclose(embed(model, x), embed(loaded, x), atol=1e-4)
        save_compat(loaded, tmp_path / "m2.tgcm")
        assert (tmp_path / "m2.tgcm").read_bytes() == p.read_bytes()

    def test_truncation(self, tmp_path):
        model = new_compat_model(PairingKey(Division.TOPS, Division.BOTTOMS), seed=3)
        p = tmp_path / "m.tgcm"
        save_compat(model, p)
        p.write_bytes(p.read_bytes()[:50])
        with pytest.raises(CatalogError, match="truncated"):
            load_compat(p)

    def test_models_directory_round_trip(self, tmp_path):
        models = {
            PairingKey(Division.TOPS, Division.BOTTOMS):
                new_compat_model(PairingKey(Division.TOPS, Division.BOTTOMS), seed=1),
            PairingKey(Division.BOTTOMS, Division.TOPS):
                new_compat_model(PairingKey(Division.BOTTOMS, Division.TOPS), seed=2),
        }
        save_models(models, tmp_path / "models")
        loaded = load_models(tmp_path / "models")
        assert set(loaded) == set(models)


class TestCoOccurrence:
    def test_symmetric_and_approved_only(self):
        outfits = [
            approved("o1", ["a", "b", "c"]),
            OutfitRecord(outfit_id="o2", item_ids=["a", "z"], source="expert",
                         verdict="pending"),
        ]
        co = co_occurrence(outfits)
        assert co["a"] == {"b", "c"}
        assert co["b"] == {"a", "c"}
        assert "z" not in co
