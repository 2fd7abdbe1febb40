import numpy as np
import pytest

from xattn.attention import TagVector
from xattn.metric import distance
from xattn.model import (
    Checkpoint,
    CheckpointFormatError,
    ModelConfig,
    UnsupportedVariantError,
    Variant,
    backward_triple,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    embed_shop,
    embed_shop_simple,
    embed_user_context,
    embed_user_simple,
    extract_features,
    forward_triple,
    init_params,
    load_checkpoint,
    params_fingerprint,
    save_checkpoint,
)

from oracles import (
    naive_affine_relu_affine,
    naive_l2_normalize,
    naive_tag_attend,
)


def small_config(variant=Variant.CTXYNET, locations=4, channels=3, tags=2, raw_dim=3):
    return ModelConfig(
        locations=locations,
        channels=channels,
        tag_count=tags,
        raw_dim=raw_dim,
        variant=variant,
    )


def identity_params(config):
    """Identity trunk/branches so features equal the (non-negative) input."""
    params = init_params(config, 0)
    eye = np.eye(config.channels)
    params.trunk.weight[...] = eye
    params.trunk.bias[...] = 0.0
    for branch in (params.branch_shop, params.branch_user):
        branch.weight[...] = eye
        branch.bias[...] = 0.0
    return params


class TestConfigAndVariant:
    def test_variant_ordering(self):
        assert Variant.YNET < Variant.TAGYNET < Variant.CTXYNET

    def test_variant_aliases(self):
        assert Variant.parse("tag") is Variant.TAGYNET
        assert Variant.parse("CtxYNet") is Variant.CTXYNET
        with pytest.raises(ValueError):
            Variant.parse("resnet")

    def test_config_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            small_config(channels=0)


class TestInitParams:
    def test_deterministic_given_seed(self):
        a = init_params(small_config(), 9)
        b = init_params(small_config(), 9)
        for (name_a, t_a), (name_b, t_b) in zip(a.named_tensors(), b.named_tensors()):
            assert name_a == name_b
            np.testing.assert_array_equal(t_a, t_b)

    def test_variant_controls_heads(self):
        names = dict(init_params(small_config(Variant.YNET), 0).named_tensors())
        assert "tag_attn.embedding" not in names and "ctx_attn.feature_weight" not in names
        names = dict(init_params(small_config(Variant.TAGYNET), 0).named_tensors())
        assert "tag_attn.embedding" in names and "ctx_attn.feature_weight" not in names
        names = dict(init_params(small_config(), 0).named_tensors())
        assert "ctx_attn.context_weight" in names

    def test_upgrade_copies_shared_and_draws_new_heads(self):
        base = init_params(small_config(Variant.YNET), 3)
        upgraded = init_params(small_config(Variant.TAGYNET), 4, base=base)
        np.testing.assert_array_equal(upgraded.trunk.weight, base.trunk.weight)
        np.testing.assert_array_equal(upgraded.branch_shop.weight, base.branch_shop.weight)
        assert upgraded.tag_attn is not None
        assert np.any(upgraded.tag_attn.embedding != 0.0)

    def test_shape_mismatch_names_tensor(self):
        base = init_params(small_config(channels=3), 0)
        with pytest.raises(ValueError, match="trunk.weight"):
            init_params(small_config(channels=4, raw_dim=3), 0, base=base)


class TestExtractFeatures:
    def test_identity_composition(self):
        config = small_config()
        params = identity_params(config)
        raw = np.abs(np.random.default_rng(5).normal(size=(4, 3)))
        got = extract_features(raw, "user", params)
        np.testing.assert_allclose(got.data, raw, atol=1e-15)

    def test_zero_trunk(self):
        config = small_config()
        params = init_params(config, 0)
        params.trunk.weight[...] = 0.0
        params.trunk.bias[...] = 0.0
        params.branch_user.bias[...] = 0.0
        got = extract_features(np.ones((4, 3)), "user", params)
        np.testing.assert_array_equal(got.data, np.zeros((4, 3)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            config = small_config(
                locations=int(rng.integers(1, 6)),
                channels=int(rng.integers(1, 5)),
                raw_dim=int(rng.integers(1, 5)),
            )
            params = init_params(config, int(rng.integers(0, 2**31)))
            raw = rng.normal(size=(config.locations, config.raw_dim))
            for domain, branch in (("user", params.branch_user), ("shop", params.branch_shop)):
                got = extract_features(raw, domain, params)
                want = naive_affine_relu_affine(
                    raw, params.trunk.weight, params.trunk.bias, branch.weight, branch.bias
                )
                np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_shape_and_domain_validation(self):
        params = init_params(small_config(), 0)
        with pytest.raises(ValueError):
            extract_features(np.zeros((3, 3)), "user", params)  # wrong L
        with pytest.raises(ValueError):
            extract_features(np.zeros((4, 3)), "street", params)


class TestEmbeddings:
    def test_embed_shop_requires_tag_head(self):
        params = init_params(small_config(Variant.YNET), 0)
        with pytest.raises(UnsupportedVariantError):
            embed_shop(np.zeros((4, 3)), TagVector.zeros(2), params)

    def test_embed_shop_constant_rows(self):
        config = small_config()
        params = identity_params(config)
        row = np.array([2.0, 1.0, 2.0])
        raw = np.tile(row, (4, 1))
        got = embed_shop(raw, TagVector.from_ids([0], 2), params)
        np.testing.assert_allclose(got, row / np.linalg.norm(row), atol=1e-12)

    def test_embed_shop_zero_tags_is_normalized_mean(self):
        config = small_config()
        params = identity_params(config)
        raw = np.abs(np.random.default_rng(8).normal(size=(4, 3)))
        got = embed_shop(raw, TagVector.zeros(2), params)
        mean = raw.mean(axis=0)
        np.testing.assert_allclose(got, mean / np.linalg.norm(mean), atol=1e-12)

    def test_embed_shop_matches_composed_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            config = small_config(
                locations=int(rng.integers(1, 6)),
                channels=int(rng.integers(1, 5)),
                tags=int(rng.integers(1, 4)),
                raw_dim=int(rng.integers(1, 5)),
            )
            params = init_params(config, int(rng.integers(0, 2**31)))
            raw = rng.normal(size=(config.locations, config.raw_dim))
            bits = TagVector(bits=rng.integers(0, 2, config.tag_count).astype(np.float64))
            got = embed_shop(raw, bits, params)
            features = naive_affine_relu_affine(
                raw,
                params.trunk.weight,
                params.trunk.bias,
                params.branch_shop.weight,
                params.branch_shop.bias,
            )
            _, pooled = naive_tag_attend(features, bits.bits, params.tag_attn.embedding)
            np.testing.assert_allclose(got, naive_l2_normalize(pooled), atol=1e-9)

    def test_embed_user_simple_single_location(self):
        config = small_config(locations=1)
        params = identity_params(config)
        raw = np.abs(np.random.default_rng(10).normal(size=(1, 3))) + 0.1
        want = raw[0] / np.linalg.norm(raw[0])
        np.testing.assert_allclose(embed_user_simple(raw, params), want, atol=1e-12)

    def test_embed_user_simple_arithmetic(self):
        config = small_config(locations=2, channels=2, raw_dim=2)
        params = identity_params(config)
        raw = np.array([[2.0, 0.0], [0.0, 2.0]])
        got = embed_user_simple(raw, params)
        np.testing.assert_allclose(got, [np.sqrt(2) / 2, np.sqrt(2) / 2], atol=1e-12)

    def test_context_with_zero_params_equals_simple(self):
        config = small_config()
        rng = np.random.default_rng(11)
        params = init_params(config, 12)
        params.ctx_attn.feature_weight[...] = 0.0
        params.ctx_attn.context_weight[...] = 0.0
        raw = rng.normal(size=(4, 3))
        ctx = rng.normal(size=3)
        ctx /= np.linalg.norm(ctx)
        np.testing.assert_allclose(
            embed_user_context(raw, ctx, params),
            embed_user_simple(raw, params),
            atol=1e-12,
        )

    def test_context_requires_ctx_head(self):
        params = init_params(small_config(Variant.TAGYNET), 0)
        with pytest.raises(UnsupportedVariantError):
            embed_user_context(np.zeros((4, 3)), np.array([1.0, 0.0, 0.0]), params)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(13)
        config = small_config()
        params = init_params(config, 14)
        # positive biases keep the ReLU from zeroing an entire map, which
        # would legitimately trip the zero-vector normalization guard
        params.trunk.bias[...] = 0.05
        params.branch_shop.bias[...] = 0.05
        params.branch_user.bias[...] = 0.05
        for _ in range(100):
            raw = rng.normal(size=(4, 3))
            bits = TagVector(bits=rng.integers(0, 2, 2).astype(np.float64))
            ctx = embed_shop(raw, bits, params)
            for emb in (
                ctx,
                embed_user_simple(raw, params),
                embed_shop_simple(raw, params),
                embed_user_context(raw, ctx, params),
            ):
                assert abs(np.linalg.norm(emb) - 1.0) <= 1e-10
                assert emb.shape == (config.channels,)

    def test_user_embedding_identical_across_variants(self):
        # the user path never touches the tag head
        raw = np.random.default_rng(15).normal(size=(4, 3))
        ynet = init_params(small_config(Variant.YNET), 16)
        tag = init_params(small_config(Variant.TAGYNET), 17, base=ynet)
        np.testing.assert_array_equal(
            embed_user_simple(raw, ynet), embed_user_simple(raw, tag)
        )


class TestForwardTriple:
    def test_identical_candidates_give_margin_loss(self):
        rng = np.random.default_rng(18)
        config = small_config()
        params = init_params(config, 19)
        anchor = rng.normal(size=(4, 3))
        candidate = rng.normal(size=(4, 3))
        bits = TagVector.from_ids([1], 2)
        out = forward_triple(anchor, candidate, candidate, bits, bits, params, 0.5)
        np.testing.assert_array_equal(out.embeddings.anchor_pos, out.embeddings.anchor_neg)
        assert out.loss == pytest.approx(0.5, abs=1e-12)

    def test_satisfied_margin_zero_loss(self):
        # anchor matching its positive exactly requires an engineered case:
        # use the non-contextual variant where both anchors coincide
        config = small_config(Variant.TAGYNET)
        params = identity_params(config)
        rng = np.random.default_rng(20)
        anchor = np.abs(rng.normal(size=(4, 3))) + 0.1
        positive = np.tile(anchor.mean(axis=0), (4, 1))
        negative = np.abs(rng.normal(size=(4, 3))) + 0.1
        bits = TagVector.zeros(2)
        out = forward_triple(anchor, positive, negative, bits, bits, params, 0.0)
        assert distance(out.embeddings.anchor_pos, out.embeddings.positive) < 1e-12
        if distance(out.embeddings.anchor_neg, out.embeddings.negative) >= 0.0:
            assert out.loss == 0.0

    def test_tags_required_for_tag_variant(self):
        params = init_params(small_config(Variant.TAGYNET), 0)
        raw = np.zeros((4, 3))
        with pytest.raises(ValueError):
            forward_triple(raw, raw, raw, None, None, params, 0.5)


class TestBackwardTriple:
    def test_frozen_trunk_reports_zero(self):
        rng = np.random.default_rng(21)
        params = init_params(small_config(), 22)
        raws = [rng.normal(size=(4, 3)) for _ in range(3)]
        bits = TagVector.from_ids([0], 2)
        loss, grads = backward_triple(
            *raws, bits, bits, params, 5.0, frozen=("trunk.weight", "trunk.bias")
        )
        assert loss > 0.0
        np.testing.assert_array_equal(grads["trunk.weight"], np.zeros((3, 3)))
        np.testing.assert_array_equal(grads["trunk.bias"], np.zeros(3))
        assert np.any(grads["branch_user.weight"] != 0.0)

    def test_inactive_hinge_all_zero(self):
        rng = np.random.default_rng(23)
        params = init_params(small_config(), 24)
        raws = [rng.normal(size=(4, 3)) for _ in range(3)]
        bits = TagVector.from_ids([0], 2)
        loss, grads = backward_triple(*raws, bits, bits, params, 0.0, frozen=())
        if loss == 0.0:
            for g in grads.values():
                np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_gradients_cover_all_tensors(self):
        params = init_params(small_config(), 25)
        rng = np.random.default_rng(26)
        raws = [rng.normal(size=(4, 3)) for _ in range(3)]
        bits = TagVector.from_ids([1], 2)
        _, grads = backward_triple(*raws, bits, bits, params, 5.0)
        assert set(grads) == {name for name, _ in params.named_tensors()}


class TestCheckpoints:
    def make_checkpoint(self, variant=Variant.CTXYNET, seed=30):
        config = small_config(variant)
        return Checkpoint(
            config=config,
            params=init_params(config, seed),
            epoch=12,
            seed=77,
            stage="ctxynet",
        )

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self.make_checkpoint()
        path = tmp_path / "model.xatn"
        save_checkpoint(path, ckpt)
        first = path.read_bytes()
        loaded = load_checkpoint(path)
        save_checkpoint(path, loaded)
        assert path.read_bytes() == first
        assert loaded.epoch == 12 and loaded.seed == 77 and loaded.stage == "ctxynet"
        for (na, ta), (nb, tb) in zip(
            ckpt.params.named_tensors(), loaded.params.named_tensors()
        ):
            assert na == nb
            np.testing.assert_array_equal(ta, tb)

    def test_truncated_file_reports_offset(self, tmp_path):
        data = checkpoint_to_bytes(self.make_checkpoint())
        with pytest.raises(CheckpointFormatError) as err:
            checkpoint_from_bytes(data[: len(data) - 10])
        assert err.value.offset is not None

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError):
            checkpoint_from_bytes(b"NOPE" + b"\x00" * 64)

    def test_trailing_garbage_rejected(self):
        data = checkpoint_to_bytes(self.make_checkpoint())
        with pytest.raises(CheckpointFormatError):
            checkpoint_from_bytes(data + b"\x00")

    def test_staged_upgrade_contract(self, tmp_path):
        # a base-variant checkpoint seeds the tag variant: shared tensors
        # copied, the tag head freshly initialized
        base_ckpt = self.make_checkpoint(variant=Variant.YNET)
        path = tmp_path / "ynet.xatn"
        save_checkpoint(path, base_ckpt)
        loaded = load_checkpoint(path)
        upgraded = init_params(small_config(Variant.TAGYNET), 99, base=loaded.params)
        np.testing.assert_array_equal(upgraded.trunk.weight, base_ckpt.params.trunk.weight)
        assert upgraded.tag_attn is not None

    def test_fingerprint_tracks_params_not_metadata(self):
        ckpt_a = self.make_checkpoint(seed=31)
        ckpt_b = Checkpoint(
            config=ckpt_a.config, params=ckpt_a.params, epoch=99, seed=1, stage="other"
        )
        assert params_fingerprint(ckpt_a.params) == params_fingerprint(ckpt_b.params)
        different = self.make_checkpoint(seed=32)
        assert params_fingerprint(ckpt_a.params) != params_fingerprint(different.params)
        assert len(params_fingerprint(ckpt_a.params)) == 32
