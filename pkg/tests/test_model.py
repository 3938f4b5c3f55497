"""Encoder, per-speaker context streams, conditioned decoder, sequence NLL."""
import math

import numpy as np
import pytest

from sphred.autodiff import ContractViolation, Tensor, softmax_values
from sphred.model import (BOU_ID, EOU_ID, ModelConfig, ParamSet, cond_bundle,
                          context_vector, decode_logits, decoder_init,
                          decoder_step, encode_utterance, gru_view, init_params,
                          initial_context, label_embedding, param_shapes,
                          sequence_nll, update_context, utterance_nll)
from sphred.nn import gru_step
from sphred.rng import derive_rng

from conftest import micro_config, micro_params


def zero_params(cfg):
    return ParamSet({k: np.zeros(s) for k, s in param_shapes(cfg).items()})


class TestEncodeUtterance:
    def test_zero_params_zero_state(self):
        cfg = micro_config()
        pb = zero_params(cfg).bind(None)
        h = encode_utterance(pb, cfg, [5, 6, 7])
        np.testing.assert_allclose(h.data, np.zeros(cfg.encoder_dim), atol=0)

    def test_single_token_is_one_gru_step(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        h = encode_utterance(pb, cfg, [9])
        x = Tensor(pb["emb.tok"].data[9])
        want = gru_step(x, Tensor(np.zeros(cfg.encoder_dim)), gru_view(pb, "enc"))
        np.testing.assert_allclose(h.data, want.data, atol=1e-12)

    def test_three_tokens_fold_composition(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=4).bind(None)
        ids = [5, 17, 3]
        got = encode_utterance(pb, cfg, ids)
        h = Tensor(np.zeros(cfg.encoder_dim))
        for i in ids:
            h = gru_step(Tensor(pb["emb.tok"].data[i]), h, gru_view(pb, "enc"))
        np.testing.assert_allclose(got.data, h.data, atol=1e-12)

    def test_empty_utterance_rejected(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        with pytest.raises(ContractViolation):
            encode_utterance(pb, cfg, [])

    def test_carried_h0_used(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        h0 = Tensor(derive_rng(0, "h0").normal(size=cfg.encoder_dim))
        a = encode_utterance(pb, cfg, [5], h0)
        b = encode_utterance(pb, cfg, [5])
        assert not np.allclose(a.data, b.data)


class TestContext:
    def test_update_a_leaves_b_bitwise_unchanged(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        ctx = initial_context(cfg)
        enc = Tensor(derive_rng(1, "enc").normal(size=cfg.encoder_dim))
        ctx2 = update_context(pb, cfg, ctx, enc, "A")
        assert ctx2.h_b is ctx.h_b
        assert not np.allclose(ctx2.h_a.data, ctx.h_a.data)

    def test_zero_status_params_halve(self):
        cfg = micro_config()
        ps = micro_params(cfg)
        for k in list(ps.arrays):
            if k.startswith("sta."):
                ps.arrays[k] = np.zeros_like(ps.arrays[k])
        pb = ps.bind(None)
        ctx = initial_context(cfg)
        ctx = ctx.__class__(Tensor(np.ones(cfg.status_dim)), Tensor(np.ones(cfg.status_dim)))
        enc = Tensor(np.zeros(cfg.encoder_dim))
        ctx2 = update_context(pb, cfg, ctx, enc, "A")
        np.testing.assert_allclose(ctx2.h_a.data, np.full(cfg.status_dim, 0.5), atol=0)
        np.testing.assert_allclose(ctx2.h_b.data, np.ones(cfg.status_dim), atol=0)

    def test_alternating_updates_match_independent_streams(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=8).bind(None)
        rng = derive_rng(2, "encs")
        encs = [Tensor(rng.normal(size=cfg.encoder_dim)) for _ in range(6)]
        ctx = initial_context(cfg)
        for k, e in enumerate(encs):
            ctx = update_context(pb, cfg, ctx, e, "A" if k % 2 == 0 else "B")
        # oracle: run each stream alone over only its speaker's encodings
        ha = Tensor(np.zeros(cfg.status_dim))
        for e in encs[0::2]:
            ha = gru_step(e, ha, gru_view(pb, "sta.a"))
        hb = Tensor(np.zeros(cfg.status_dim))
        for e in encs[1::2]:
            hb = gru_step(e, hb, gru_view(pb, "sta.b"))
        np.testing.assert_allclose(ctx.h_a.data, ha.data, atol=1e-12)
        np.testing.assert_allclose(ctx.h_b.data, hb.data, atol=1e-12)

    def test_speaker_separation_property(self):
        # corpora differing only in A's utterances leave the B stream identical
        cfg = micro_config()
        pb = micro_params(cfg, seed=3).bind(None)
        rng = derive_rng(3, "sep")
        for _ in range(20):
            a1 = [Tensor(rng.normal(size=cfg.encoder_dim)) for _ in range(3)]
            a2 = [Tensor(rng.normal(size=cfg.encoder_dim)) for _ in range(3)]
            bs = [Tensor(rng.normal(size=cfg.encoder_dim)) for _ in range(3)]

            def run(a_encs):
                ctx = initial_context(cfg)
                states = []
                for k in range(6):
                    enc = a_encs[k // 2] if k % 2 == 0 else bs[k // 2]
                    ctx = update_context(pb, cfg, ctx, enc, "A" if k % 2 == 0 else "B")
                    states.append(ctx.h_b.data.copy())
                return states

            s1, s2 = run(a1), run(a2)
            for x, y in zip(s1, s2):
                assert np.array_equal(x, y)

    def test_context_vector_layout(self):
        cfg = micro_config()
        ctx = initial_context(cfg)
        ctx.h_a.data[:] = [1.0, 2.0, 3.0, 4.0]
        ctx.h_b.data[:] = [5.0, 6.0, 7.0, 8.0]
        v = context_vector(cfg, ctx)
        assert v.data.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]
        assert v.shape == (cfg.context_dim,)

    def test_fresh_context_vector_is_zero(self):
        cfg = micro_config()
        v = context_vector(cfg, initial_context(cfg))
        np.testing.assert_allclose(v.data, np.zeros(cfg.context_dim), atol=0)

    def test_shared_status_single_stream(self):
        cfg = micro_config(shared=True)
        pb = micro_params(cfg, seed=9).bind(None)
        ctx = initial_context(cfg)
        assert ctx.h_b is None
        enc = Tensor(derive_rng(4, "enc").normal(size=cfg.encoder_dim))
        c1 = update_context(pb, cfg, ctx, enc, "A")
        c2 = update_context(pb, cfg, ctx, enc, "B")
        # one shared stream: both speakers advance the same state
        np.testing.assert_allclose(c1.h_a.data, c2.h_a.data, atol=0)
        assert context_vector(cfg, c1).shape == (cfg.context_dim,)

    def test_bad_speaker_rejected(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        with pytest.raises(ContractViolation):
            update_context(pb, cfg, initial_context(cfg),
                           Tensor(np.zeros(cfg.encoder_dim)), "C")


def _random_cond(cfg, seed=0):
    return Tensor(derive_rng(seed, "cond").normal(size=cfg.cond_dim))


class TestDecoder:
    def test_zero_params_uniform_rows(self):
        cfg = micro_config()
        pb = zero_params(cfg).bind(None)
        logits = decode_logits(pb, cfg, [BOU_ID, 5, 6], Tensor(np.zeros(cfg.cond_dim)))
        p = softmax_values(logits.data)
        np.testing.assert_allclose(p, np.full((3, cfg.vocab_size), 1 / cfg.vocab_size),
                                   atol=1e-12)

    def test_rows_sum_to_one(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=5).bind(None)
        logits = decode_logits(pb, cfg, [BOU_ID, 9, 10, 11], _random_cond(cfg))
        p = softmax_values(logits.data)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(4), atol=1e-12)

    def test_one_token_nll_is_neg_log_softmax(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=6).bind(None)
        cond = _random_cond(cfg, 1)
        logits = decode_logits(pb, cfg, [BOU_ID], cond)
        nll = utterance_nll(pb, cfg, [BOU_ID], [7], cond)
        want = -math.log(softmax_values(logits.data)[0][7])
        assert nll.item() == pytest.approx(want, abs=1e-12)

    def test_prev_must_start_with_bou(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        with pytest.raises(ContractViolation):
            decode_logits(pb, cfg, [5, 6], _random_cond(cfg))

    def test_z_changes_logits(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=7).bind(None)
        ctx0 = np.zeros(cfg.context_dim)
        y = derive_rng(0, "y").normal(size=cfg.label_embed_dim)
        z1 = np.zeros(cfg.latent_dim)
        z2 = z1.copy()
        z2[0] += 1e-3
        def logits_for(z):
            cond = cond_bundle(cfg, Tensor(ctx0), Tensor(z), Tensor(y))
            return decode_logits(pb, cfg, [BOU_ID, 5], cond).data
        diff = np.abs(logits_for(z1) - logits_for(z2)).max()
        assert diff > 1e-9  # finite-difference sensitivity, not exactly zero

    def test_decoder_step_matches_decode_logits(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=10).bind(None)
        cond = _random_cond(cfg, 2)
        ids = [BOU_ID, 5, 9, 12]
        logits = decode_logits(pb, cfg, ids, cond)
        h = decoder_init(pb, cfg, cond)
        for t, tok in enumerate(ids):
            h, row = decoder_step(pb, cfg, h, tok, cond)
            np.testing.assert_allclose(row.data, logits.data[t], atol=1e-12)


class TestSequenceNll:
    def test_uniform_model_gives_ntokens_log_v(self):
        cfg = micro_config()
        pb = zero_params(cfg).bind(None)
        turns = [[[5, 6, EOU_ID]], [[7, EOU_ID]]]
        zs = [Tensor(np.zeros(cfg.latent_dim))] * 2
        ys = [0, 1]
        nll = sequence_nll(pb, cfg, turns, zs, ys)
        assert nll.item() == pytest.approx(5 * math.log(cfg.vocab_size), abs=1e-9)

    def test_single_utterance_equals_direct_nll(self):
        cfg = micro_config()
        pb = micro_params(cfg, seed=11).bind(None)
        ids = [9, 10, EOU_ID]
        z = Tensor(derive_rng(1, "z").normal(size=cfg.latent_dim))
        nll = sequence_nll(pb, cfg, [[ids]], [z], [2])
        cond = cond_bundle(cfg, context_vector(cfg, initial_context(cfg)), z,
                           label_embedding(pb, cfg, 2))
        want = utterance_nll(pb, cfg, [BOU_ID] + ids[:-1], ids, cond)
        assert nll.item() == pytest.approx(want.item(), abs=1e-12)

    def test_two_turn_factorization_oracle(self):
        # hand-rolled loop over the per-token factorization
        cfg = micro_config()
        pb = micro_params(cfg, seed=12).bind(None)
        turns = [[[5, 6, EOU_ID]], [[8, 9, 10, EOU_ID]]]
        rng = derive_rng(2, "zs")
        zs = [Tensor(rng.normal(size=cfg.latent_dim)) for _ in range(2)]
        ys = [0, 1]
        got = sequence_nll(pb, cfg, turns, zs, ys)

        total = 0.0
        ctx = initial_context(cfg)
        for k, turn in enumerate(turns):
            for u, ids in enumerate(turn):
                cond = cond_bundle(cfg, context_vector(cfg, ctx), zs[k],
                                   label_embedding(pb, cfg, ys[k]))
                prev = [BOU_ID] + ids[:-1]
                logits = decode_logits(pb, cfg, prev, cond)
                logp = np.log(softmax_values(logits.data))
                for t, target in enumerate(ids):
                    total -= logp[t][target]
                enc = encode_utterance(pb, cfg, ids)
            ctx = update_context(pb, cfg, ctx, enc, "A" if k % 2 == 0 else "B")
        assert got.item() == pytest.approx(total, abs=1e-9)

    def test_mismatched_latents_rejected(self):
        cfg = micro_config()
        pb = micro_params(cfg).bind(None)
        with pytest.raises(ContractViolation):
            sequence_nll(pb, cfg, [[[5, EOU_ID]]], [], [])


class TestConfig:
    def test_context_dim_is_twice_status(self):
        for s in (1, 4, 32):
            cfg = ModelConfig(vocab_size=20, status_dim=s)
            assert cfg.context_dim == 2 * s

    def test_invalid_dims_rejected(self):
        with pytest.raises(ContractViolation):
            ModelConfig(vocab_size=20, latent_dim=0)
        with pytest.raises(ContractViolation):
            ModelConfig(vocab_size=4)
        with pytest.raises(ContractViolation):
            ModelConfig(vocab_size=20, scenario=3)

    def test_scenario1_has_no_classifier_params(self):
        shapes1 = param_shapes(micro_config(scenario=1))
        shapes2 = param_shapes(micro_config(scenario=2))
        assert not any(k.startswith("cls.") for k in shapes1)
        assert any(k.startswith("cls.") for k in shapes2)

    def test_label_count_by_scenario(self):
        assert micro_config(scenario=1).n_labels == 2
        assert micro_config(scenario=2).n_labels == 3

    def test_init_determinism_and_bias_zero(self):
        cfg = micro_config()
        a = init_params(cfg, derive_rng(0, "init"))
        b = init_params(cfg, derive_rng(0, "init"))
        for k in a:
            assert np.array_equal(a[k], b[k])
        assert np.all(a["enc.b_z"] == 0) and np.all(a["out.b"] == 0)
