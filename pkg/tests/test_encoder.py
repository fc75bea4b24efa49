"""Encoder contracts: masking invariance, pooling, freezing, checkpoints."""

import numpy as np
import pytest

from notelab.encoder import (
    EncoderConfig,
    FreezeSpec,
    apply_freeze,
    encode,
    init_params,
    load_checkpoint,
    pad_batch,
    params_digest,
    pool,
    save_checkpoint,
)
from notelab.errors import (
    ContractError,
    CorruptCheckpointError,
    UnsupportedVersionError,
)
from notelab.nn import AdamW, Tensor, backward, mean


CFG = EncoderConfig(layers=2, heads=2, d_model=16, d_ff=32, max_len=16, vocab_size=30, seed=0)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG)


class TestEncode:
    def test_output_shape(self, params):
        ids, mask = pad_batch([[3, 5, 6], [3, 7]])
        h = encode(params, CFG, ids, mask)
        assert h.shape == (2, 3, CFG.d_model)

    def test_identical_rows_identical_outputs(self, params):
        ids, mask = pad_batch([[3, 5, 6], [3, 5, 6]])
        h = encode(params, CFG, ids, mask).data
        np.testing.assert_array_equal(h[0], h[1])

    def test_batch_permutation_equivariance(self, params):
        seqs = [[3, 5, 6], [3, 7], [3, 8, 9, 10]]
        ids, mask = pad_batch(seqs)
        h = encode(params, CFG, ids, mask).data
        perm = [2, 0, 1]
        ids_p, mask_p = pad_batch([seqs[i] for i in perm])
        h_p = encode(params, CFG, ids_p, mask_p).data
        for out_row, in_row in enumerate(perm):
            np.testing.assert_allclose(
                h_p[out_row, : len(seqs[in_row])],
                h[in_row, : len(seqs[in_row])],
                atol=1e-6,
            )

    def test_trailing_padding_leaves_states_unchanged(self, params):
        seq = [3, 5, 6, 7]
        ids_a = np.array([seq])
        mask_a = np.ones((1, 4))
        ids_b = np.array([seq + [0, 0, 0]])
        mask_b = np.array([[1.0, 1, 1, 1, 0, 0, 0]])
        ha = encode(params, CFG, ids_a, mask_a).data
        hb = encode(params, CFG, ids_b, mask_b).data
        np.testing.assert_allclose(ha[0], hb[0, :4], atol=1e-5)

    def test_too_long_sequence_rejected(self, params):
        ids = np.zeros((1, CFG.max_len + 1), dtype=np.int64)
        mask = np.ones_like(ids, dtype=float)
        with pytest.raises(ContractError, match="max_len"):
            encode(params, CFG, ids, mask)


class TestDropout:
    def test_inference_ignores_dropout_rate(self):
        cfg = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, max_len=8,
                            vocab_size=30, dropout=0.5, seed=1)
        params = init_params(cfg)
        ids, mask = pad_batch([[3, 5, 6]])
        a = encode(params, cfg, ids, mask).data
        b = encode(params, cfg, ids, mask).data
        np.testing.assert_array_equal(a, b)

    def test_training_dropout_is_seeded_and_active(self):
        cfg = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, max_len=8,
                            vocab_size=30, dropout=0.5, seed=1)
        params = init_params(cfg)
        ids, mask = pad_batch([[3, 5, 6]])
        a = encode(params, cfg, ids, mask, train=True, rng=np.random.default_rng(7)).data
        b = encode(params, cfg, ids, mask, train=True, rng=np.random.default_rng(7)).data
        c = encode(params, cfg, ids, mask, train=True, rng=np.random.default_rng(8)).data
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 0

    def test_training_dropout_requires_rng(self):
        cfg = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, max_len=8,
                            vocab_size=30, dropout=0.5, seed=1)
        params = init_params(cfg)
        ids, mask = pad_batch([[3, 5]])
        with pytest.raises(ContractError, match="rng"):
            encode(params, cfg, ids, mask, train=True)


class TestPool:
    def test_single_token_equals_its_state(self, params):
        ids, mask = pad_batch([[5]])
        h = encode(params, CFG, ids, mask)
        e = pool(h, mask)
        np.testing.assert_allclose(e.data[0], h.data[0, 0], atol=1e-7)

    def test_two_tokens_average(self):
        h = Tensor(np.array([[[1.0, 3.0], [3.0, 5.0]]]))
        e = pool(h, np.ones((1, 2)))
        np.testing.assert_allclose(e.data[0], [2.0, 4.0], atol=1e-6)

    def test_masked_mean_matches_direct_oracle(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(3, 5, 4)).astype(np.float32)
        mask = np.array(
            [[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=float
        )
        e = pool(Tensor(h), mask).data
        for i in range(3):
            keep = mask[i].astype(bool)
            np.testing.assert_allclose(e[i], h[i, keep].mean(axis=0), atol=1e-6)

    def test_all_pad_row_rejected(self):
        h = Tensor(np.zeros((1, 2, 4)))
        with pytest.raises(ContractError, match="row 0"):
            pool(h, np.zeros((1, 2)))

    def test_pool_in_convex_hull(self, params):
        ids, mask = pad_batch([[3, 5, 6, 7, 8]])
        h = encode(params, CFG, ids, mask)
        e = pool(h, mask).data[0]
        lo = h.data[0].min(axis=0) - 1e-6
        hi = h.data[0].max(axis=0) + 1e-6
        assert ((e >= lo) & (e <= hi)).all()


def _train_head_steps(params, steps=20):
    """Drive gradients through the encoder for a few optimizer steps."""
    head = Tensor(np.random.default_rng(1).normal(0, 0.1, size=(CFG.d_model, 2)), requires_grad=True)
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    opt = AdamW({**trainable, "head.w": head}, lr=1e-2, weight_decay=0.0)
    ids, mask = pad_batch([[3, 5, 6], [3, 7, 9]])
    for _ in range(steps):
        opt.zero_grad()
        h = encode(params, CFG, ids, mask)
        e = pool(h, mask)
        loss = mean((e @ head) * (e @ head))
        backward(loss)
        opt.step()


class TestFreeze:
    def test_all_frozen_digest_unchanged(self):
        params = init_params(CFG)
        apply_freeze(params, FreezeSpec.all(), CFG.layers)
        before = params_digest(params)
        _train_head_steps(params)
        assert params_digest(params) == before

    def test_k_zero_everything_trainable(self):
        params = init_params(CFG)
        trainable = apply_freeze(params, FreezeSpec.none(), CFG.layers)
        assert set(trainable) == set(params)

    def test_k_equals_layers_freezes_encoder(self):
        params = init_params(CFG)
        trainable = apply_freeze(params, FreezeSpec(CFG.layers), CFG.layers)
        assert trainable == {}
        before = params_digest(params)
        _train_head_steps(params)
        assert params_digest(params) == before

    def test_partial_freeze_prefix_fixed_suffix_moves(self):
        params = init_params(CFG)
        apply_freeze(params, FreezeSpec(1), CFG.layers)
        frozen_names = ["tok_emb", "pos_emb"] + [n for n in params if n.startswith("layers.0.")]
        live_names = [n for n in params if n.startswith("layers.1.")]
        digest = lambda names: params_digest({n: params[n] for n in names})
        before_frozen = digest(frozen_names)
        before_live = digest(live_names)
        _train_head_steps(params)
        assert digest(frozen_names) == before_frozen
        assert digest(live_names) != before_live

    def test_prefix_out_of_range(self):
        params = init_params(CFG)
        with pytest.raises(ContractError):
            apply_freeze(params, FreezeSpec(CFG.layers + 1), CFG.layers)

    def test_parse(self):
        assert FreezeSpec.parse("all").is_all
        assert FreezeSpec.parse("none").prefix == 0
        assert FreezeSpec.parse("2").prefix == 2


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = init_params(CFG)
        heads = {"lm_head.w": Tensor(np.random.default_rng(2).normal(size=(CFG.d_model, CFG.vocab_size)), requires_grad=True)}
        path = tmp_path / "enc.ckpt"
        save_checkpoint(path, CFG, params, heads, metadata={"objective": "mlm", "steps": 7, "seed": 0})
        ck = load_checkpoint(path)
        assert ck.config == CFG
        assert ck.metadata["objective"] == "mlm"
        assert params_digest(ck.params) == params_digest(params)
        assert params_digest(ck.heads) == params_digest(heads)
        ids, mask = pad_batch([[3, 5, 6]])
        np.testing.assert_array_equal(
            encode(params, CFG, ids, mask).data, encode(ck.params, ck.config, ids, mask).data
        )

    def test_truncated_file_is_corruption_error(self, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(path, CFG, init_params(CFG))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(path, CFG, init_params(CFG))
        blob = path.read_bytes()
        header, _, payload = blob.partition(b"\n")
        import json

        obj = json.loads(header)
        obj["format_version"] = 99
        path.write_bytes(json.dumps(obj).encode() + b"\n" + payload)
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_flipped_payload_byte_detected(self, tmp_path):
        path = tmp_path / "enc.ckpt"
        save_checkpoint(path, CFG, init_params(CFG))
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError, match="digest"):
            load_checkpoint(path)
