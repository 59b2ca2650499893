import math

import numpy as np
import pytest

from helpers import check_gradients, fd_gradient, rel_err
from promptmim import numerics as nm
from promptmim import vocab
from promptmim.encoders import (
    DualEncoder,
    EncoderConfig,
    contrastive_pretrain_loss,
    patchify,
    unpatchify,
)
from promptmim.errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    NonFiniteError,
)
from promptmim.masking import rng_from, sample_random_mask
from promptmim.numerics import Tensor


@pytest.fixture(scope="module")
def tiny_encoder():
    return DualEncoder(EncoderConfig(), seed=11)


@pytest.fixture(scope="module")
def image():
    return rng_from(42, "image").random((16, 16))


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(DimensionError):
            EncoderConfig(image_side=15)
        with pytest.raises(DimensionError):
            EncoderConfig(embed_dim=33)

    def test_derived_quantities(self):
        cfg = EncoderConfig()
        assert cfg.grid_side == 4
        assert cfg.n_patches == 16
        assert cfg.patch_dim == 16


class TestPatchify:
    def test_small_grid(self):
        img = np.arange(64.0).reshape(8, 8)
        grid = patchify(img, 4)
        assert grid.patches.shape == (4, 16)
        assert (grid.grid_h, grid.grid_w) == (2, 2)

    def test_default_grid(self):
        grid = patchify(np.zeros((16, 16)), 4)
        assert grid.patches.shape == (16, 16)
        assert (grid.grid_h, grid.grid_w) == (4, 4)

    def test_round_trip(self, image):
        grid = patchify(image, 4)
        np.testing.assert_array_equal(unpatchify(grid, 4), image)

    def test_row_major_order(self):
        img = np.zeros((8, 8))
        img[0:4, 4:8] = 1.0  # second patch in row-major order
        grid = patchify(img, 4)
        assert np.all(grid.patches[1] == 1.0)
        assert np.all(grid.patches[[0, 2, 3]] == 0.0)

    def test_indivisible_side(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((10, 10)), 4)


class TestVisionEncode:
    def test_full_visibility_reduction(self, tiny_encoder, image):
        grid = patchify(image, 4)
        with nm.no_grad():
            a = tiny_encoder.vision_encode(grid, range(16))
            b = tiny_encoder.encode_image(image)
        np.testing.assert_array_equal(a.data, b.data)

    def test_token_count_accounting(self, tiny_encoder, image):
        grid = patchify(image, 4)
        mask = sample_random_mask(16, 0.75, rng_from(0, "vis"))
        before = tiny_encoder.tokens_processed
        with nm.no_grad():
            tiny_encoder.vision_encode(grid, mask.visible)
        assert tiny_encoder.last_token_count == 5  # 4 visible + summary
        assert tiny_encoder.tokens_processed - before == 5

    def test_distinct_visible_sets_differ(self, tiny_encoder, image):
        grid = patchify(image, 4)
        with nm.no_grad():
            a = tiny_encoder.vision_encode(grid, [0, 1, 2, 3])
            b = tiny_encoder.vision_encode(grid, [12, 13, 14, 15])
        assert not np.array_equal(a.data, b.data)

    def test_empty_visible_set(self, tiny_encoder, image):
        grid = patchify(image, 4)
        with pytest.raises(DegenerateInputError):
            tiny_encoder.vision_encode(grid, [])

    def test_invalid_indices(self, tiny_encoder, image):
        grid = patchify(image, 4)
        with pytest.raises(InputError):
            tiny_encoder.vision_encode(grid, [0, 0, 1])
        with pytest.raises(InputError):
            tiny_encoder.vision_encode(grid, [99])

    def test_deterministic(self, tiny_encoder, image):
        with nm.no_grad():
            a = tiny_encoder.encode_image(image)
            b = tiny_encoder.encode_image(image)
        np.testing.assert_array_equal(a.data, b.data)


class TestTextEncode:
    def test_deterministic(self, tiny_encoder):
        ids = vocab.template_tokens("dog")
        with nm.no_grad():
            a = tiny_encoder.text_encode(ids)
            b = tiny_encoder.text_encode(ids)
        np.testing.assert_array_equal(a.data, b.data)

    def test_one_token_difference(self, default_encoder):
        with nm.no_grad():
            a = default_encoder.text_encode(vocab.template_tokens("dog"))
            b = default_encoder.text_encode(vocab.template_tokens("cat"))
        assert not np.array_equal(a.data, b.data)

    def test_singleton_scan(self, tiny_encoder):
        # Every vocabulary word alone must produce a finite nonzero embedding.
        for tid in range(vocab.VOCAB_SIZE):
            with nm.no_grad():
                emb = tiny_encoder.text_encode([tid])
            norm = float(np.linalg.norm(emb.data))
            assert np.isfinite(norm) and norm > 0.0

    def test_length_limits(self, tiny_encoder):
        with pytest.raises(DimensionError):
            tiny_encoder.text_encode([])
        with pytest.raises(DimensionError):
            tiny_encoder.text_encode([0] * 13)

    def test_out_of_vocabulary(self, tiny_encoder):
        with pytest.raises(InputError):
            tiny_encoder.text_encode([vocab.VOCAB_SIZE])


class TestTextEncodeSoft:
    def test_table_bypass_consistency(self, tiny_encoder):
        ids = vocab.template_tokens("dog")
        with nm.no_grad():
            prefix = tiny_encoder.table_rows(ids[:4])
            soft = tiny_encoder.text_encode_soft(prefix, ids[4:])
            hard = tiny_encoder.text_encode(ids)
        np.testing.assert_array_equal(soft.data, hard.data)

    def test_prefix_gradients(self, tiny_encoder):
        rng = np.random.default_rng(3)
        prefix = Tensor(rng.normal(0, 0.1, size=(4, 32)), requires_grad=True)
        w = Tensor(rng.normal(size=32))
        cls = [vocab.token_id("dog")]

        check_gradients(
            lambda: nm.sum_(nm.mul(tiny_encoder.text_encode_soft(prefix, cls), w)),
            [prefix], 1e-4, rng=rng, max_coords=20,
        )

    def test_positional_sensitivity(self, tiny_encoder):
        rng = np.random.default_rng(5)
        prefix = rng.normal(0, 0.1, size=(4, 32))
        swapped = prefix[[1, 0, 2, 3]]
        cls = [vocab.token_id("dog")]
        with nm.no_grad():
            a = tiny_encoder.text_encode_soft(Tensor(prefix), cls)
            b = tiny_encoder.text_encode_soft(Tensor(swapped), cls)
        assert not np.array_equal(a.data, b.data)

    def test_dimension_check(self, tiny_encoder):
        with pytest.raises(DimensionError):
            tiny_encoder.text_encode_soft(Tensor(np.zeros((4, 16))), [0])


class TestTemplate:
    def test_template_tokens(self, tiny_encoder):
        ids = tiny_encoder.embed_template("dog")
        words = [vocab.WORDS[i] for i in ids]
        assert words == ["a", "photo", "of", "a", "dog"]

    def test_unknown_class(self, tiny_encoder):
        with pytest.raises(InputError):
            tiny_encoder.embed_template("unicorn")


class TestContrastiveLoss:
    def test_aligned_orthonormal_small_tau(self):
        embs = Tensor(np.eye(4))
        loss = contrastive_pretrain_loss(embs, embs, tau=0.01)
        assert loss.item() < 1e-9

    def test_identical_embeddings_give_log_n(self):
        row = np.ones(8) / math.sqrt(8)
        embs = Tensor(np.tile(row, (5, 1)))
        loss = contrastive_pretrain_loss(embs, embs, tau=0.1)
        assert abs(loss.item() - math.log(5)) < 1e-9

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(0)
        n, d, tau = 6, 8, 0.25
        img = rng.normal(size=(n, d))
        txt = rng.normal(size=(n, d))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)

        # independent reimplementation with plain python floats
        def ce_rows(mat):
            total = 0.0
            for i in range(n):
                logits = [mat[i][j] / tau for j in range(n)]
                m = max(logits)
                denom = sum(math.exp(x - m) for x in logits)
                total += -(logits[i] - m - math.log(denom))
            return total / n

        sims = [[float(np.dot(img[i], txt[j])) for j in range(n)]
                for i in range(n)]
        sims_t = [[sims[j][i] for j in range(n)] for i in range(n)]
        expected = 0.5 * (ce_rows(sims) + ce_rows(sims_t))

        loss = contrastive_pretrain_loss(Tensor(img), Tensor(txt), tau)
        assert abs(loss.item() - expected) < 1e-12

    def test_too_few_pairs(self):
        embs = Tensor(np.ones((1, 4)))
        with pytest.raises(DegenerateInputError):
            contrastive_pretrain_loss(embs, embs, 0.1)

    def test_batch_size_mismatch(self):
        with pytest.raises(DimensionError):
            contrastive_pretrain_loss(Tensor(np.ones((3, 4))),
                                      Tensor(np.ones((2, 4))), 0.1)


class TestFreezeAndCheckpoint:
    def test_freeze_clears_grad_flags(self):
        enc = DualEncoder(EncoderConfig(), seed=1)
        assert all(p.requires_grad for p in enc.parameters())
        enc.freeze()
        assert enc.frozen
        assert not any(p.requires_grad for p in enc.parameters())

    def test_checksum_stable(self, tiny_encoder):
        assert tiny_encoder.checksum() == tiny_encoder.checksum()

    def test_save_load_round_trip(self, tmp_path):
        enc = DualEncoder(EncoderConfig(), seed=2)
        enc.freeze()
        path = tmp_path / "enc.json"
        enc.save(path)
        loaded = DualEncoder.load(path)
        assert loaded.checksum() == enc.checksum()
        assert loaded.frozen
        assert abs(loaded.tau - enc.tau) == 0.0

    def test_load_validates_shapes(self, tmp_path):
        import json

        enc = DualEncoder(EncoderConfig(), seed=3)
        path = tmp_path / "enc.json"
        enc.save(path)
        payload = json.loads(path.read_text())
        payload["params"]["vision.cls"] = [[0.0, 1.0]]
        path.write_text(json.dumps(payload))
        with pytest.raises(InputError):
            DualEncoder.load(path)

    def test_load_validates_param_table(self, tmp_path):
        import json

        enc = DualEncoder(EncoderConfig(), seed=3)
        path = tmp_path / "enc.json"
        enc.save(path)
        payload = json.loads(path.read_text())
        del payload["params"]["vision.cls"]
        path.write_text(json.dumps(payload))
        with pytest.raises(InputError):
            DualEncoder.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            DualEncoder.load(tmp_path / "nope.json")

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text("{}")
        with pytest.raises(InputError):
            DualEncoder.load(path)


class TestVisionGradients:
    def test_parameter_gradients_match_fd(self, tiny_encoder, image):
        rng = np.random.default_rng(9)
        grid = patchify(image, 4)
        w = Tensor(rng.normal(size=32))
        names = ["vision.patch_embed.w", "vision.block0.attn.v.w",
                 "vision.block1.mlp.w2", "vision.proj", "vision.pos"]

        def build():
            return nm.sum_(nm.mul(tiny_encoder.vision_encode(grid, range(16)), w))

        for name in names:
            p = tiny_encoder.params[name]
            p.grad = None
            loss = build()
            nm.backward(loss)
            coords = sorted(int(i) for i in
                            rng.choice(p.data.size, size=8, replace=False))
            fd = fd_gradient(lambda: build().item(), p.data, coords)
            assert rel_err(fd, p.grad.reshape(-1)[coords]) < 1e-4
            for q in tiny_encoder.parameters():
                q.grad = None
