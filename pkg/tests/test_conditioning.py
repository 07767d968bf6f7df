"""Tokenizer, frozen embedders, lyric encoder, and condition dropout."""

import warnings

import pytest
import torch

from melflow.conditioning import (
    BOS,
    BYTE_OFFSET,
    EOS,
    PAD,
    TAG_TOKENS,
    VOCAB_SIZE,
    ConditionEncoders,
    DropoutRates,
    LyricEncoder,
    LyricError,
    SpeakerError,
    TextEmbedder,
    TextError,
    detokenize_lyrics,
    is_burst_token,
    split_text_tokens,
    tokenize_lyrics,
)


class TestTokenizer:
    def test_structure_tags_map_to_reserved_ids(self):
        toks = tokenize_lyrics("[verse] la\n[chorus] da")
        assert toks[0] == BOS and toks[-1] == EOS
        assert toks[1] == TAG_TOKENS["verse"]
        assert TAG_TOKENS["chorus"] in toks

    def test_plain_text_is_bytes_plus_offset(self):
        toks = tokenize_lyrics("ab")
        assert toks == [BOS, ord("a") + BYTE_OFFSET, ord("b") + BYTE_OFFSET, EOS]

    def test_unknown_bracket_tag_warns_and_falls_back(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            toks = tokenize_lyrics("[bridge2] x")
            assert any("bridge2" in str(w.message) for w in caught)
        # fell back to byte tokens for the bracket text itself
        assert toks[1] == ord("[") + BYTE_OFFSET

    def test_instrumental_must_stand_alone(self):
        assert tokenize_lyrics("[inst]") == [BOS, TAG_TOKENS["inst"], EOS]
        assert tokenize_lyrics("[instrumental]") == [BOS, TAG_TOKENS["instrumental"], EOS]
        with pytest.raises(LyricError):
            tokenize_lyrics("[inst] la la")

    def test_budget_enforced(self):
        with pytest.raises(LyricError) as exc:
            tokenize_lyrics("x" * 5000)
        assert "4096" in str(exc.value)

    def test_detokenize_inverts(self):
        text = "[verse] hello\n[chorus] world"
        assert detokenize_lyrics(tokenize_lyrics(text)) == text

    def test_burst_token_predicate(self):
        toks = tokenize_lyrics("[verse] a b")
        flags = [is_burst_token(t) for t in toks]
        # tag and spaces are not bursts, letters are
        assert flags.count(True) == 2
        assert not is_burst_token(TAG_TOKENS["verse"])
        assert not is_burst_token(PAD)

    def test_vocab_covers_bytes_and_tags(self):
        assert VOCAB_SIZE == BYTE_OFFSET + 256
        assert max(TAG_TOKENS.values()) < BYTE_OFFSET


class TestTextEmbedder:
    def test_deterministic_across_instances(self):
        a = TextEmbedder(seed=1000).embed("synth pop")
        b = TextEmbedder(seed=1000).embed("synth pop")
        assert torch.equal(a, b)

    def test_seed_changes_embedding(self):
        a = TextEmbedder(seed=1000).embed("synth pop")
        b = TextEmbedder(seed=1001).embed("synth pop")
        assert not torch.equal(a, b)

    def test_shape_and_scale(self):
        emb = TextEmbedder(seed=0).embed("pop, warm vinyl")
        n_tokens = len(split_text_tokens("pop, warm vinyl"))
        assert emb.shape == (n_tokens, 768)
        # entries ~ N(0, 1/sqrt(768)): the norm of each row is near 768**0.25
        norms = emb.norm(dim=-1)
        assert float(norms.mean()) == pytest.approx(768 ** -0.5 * 768 ** 0.5, rel=0.2)

    def test_distinct_words_nearly_orthogonal(self):
        emb = TextEmbedder(seed=0)
        a = emb.embed("pop")[0]
        b = emb.embed("metal")[0]
        cos = torch.dot(a, b) / (a.norm() * b.norm())
        assert abs(float(cos)) < 0.5

    def test_comma_splitting(self):
        assert split_text_tokens("pop, rock  jazz") == ["pop", "rock", "jazz"]

    def test_budget(self):
        with pytest.raises(TextError):
            TextEmbedder(seed=0).embed(" ".join(["w"] * 300))

    def test_empty_text_embeds_one_token(self):
        assert TextEmbedder(seed=0).embed("").shape[0] == 1


class TestLyricEncoder:
    def test_token_order_changes_embeddings(self):
        # the k-th burst token owns the k-th time slot, so swapping two
        # tokens must not merely swap their embeddings
        torch.manual_seed(7)
        enc = LyricEncoder(d=32, heads=4, blocks=2, vocab_size=VOCAB_SIZE)
        ab = enc(torch.tensor([[1, 105, 106, 2]]))
        ba = enc(torch.tensor([[1, 106, 105, 2]]))
        swapped = ab[:, [0, 2, 1, 3]]
        assert not torch.allclose(ba, swapped, atol=1e-4)

    def test_pad_append_does_not_change_valid_positions(self):
        torch.manual_seed(3)
        enc = LyricEncoder(d=32, heads=4, blocks=2, vocab_size=VOCAB_SIZE)
        ids = torch.tensor([[5, 9, 30, 40]])
        base = enc(ids, ids != PAD)
        padded = torch.cat([ids, torch.zeros(1, 3, dtype=torch.long)], dim=1)
        out = enc(padded, padded != PAD)
        assert torch.allclose(base, out[:, :4], atol=1e-6)

    def test_unused_vocab_rows_get_no_gradient(self):
        torch.manual_seed(4)
        enc = LyricEncoder(d=16, heads=2, blocks=1, vocab_size=64)
        ids = torch.tensor([[3, 7, 9]])  # no PAD anywhere
        out = enc(ids, ids != PAD)
        out.sum().backward()
        grad = enc.table.weight.grad
        used = {3, 7, 9}
        for row in range(64):
            row_grad = float(grad[row].abs().sum())
            if row in used:
                assert row_grad > 0
            else:
                assert row_grad == 0

    def test_output_shape(self):
        enc = LyricEncoder(d=32, heads=4, blocks=2, vocab_size=VOCAB_SIZE)
        ids = torch.randint(3, 60, (2, 11))
        assert enc(ids, ids != PAD).shape == (2, 11, 32)


class TestSpeakers:
    def test_none_maps_to_zero_vector(self):
        enc = ConditionEncoders(n_speakers=4)
        assert torch.equal(enc.speaker_vector(None), torch.zeros(512))

    def test_unknown_id_rejected(self):
        enc = ConditionEncoders(n_speakers=4)
        with pytest.raises(SpeakerError):
            enc.speaker_vector(7)

    def test_finetune_omission_forces_zero(self):
        enc = ConditionEncoders(n_speakers=4, speaker_omitted=True)
        assert torch.equal(enc.speaker_vector(2), torch.zeros(512))

    def test_known_id_deterministic_per_instance(self):
        enc = ConditionEncoders(n_speakers=4)
        assert torch.equal(enc.speaker_vector(1), enc.speaker_vector(1))
        assert not torch.equal(enc.speaker_vector(1), enc.speaker_vector(2))


def encode_bundle(enc):
    return enc.encode(
        text="pop, bright",
        lyric_ids=torch.tensor([5, 9, 30]),
        speaker_id=1,
    )


class TestDropout:
    def test_rates_zero_passes_through(self, generator):
        enc = ConditionEncoders()
        bundle = encode_bundle(enc)
        out = enc.apply_condition_dropout(
            bundle, generator, DropoutRates(0.0, 0.0, 0.0, 0.0)
        )
        assert torch.equal(out.text_emb, bundle.text_emb)
        assert torch.equal(out.lyric_emb, bundle.lyric_emb)
        assert torch.equal(out.speaker_emb, bundle.speaker_emb)
        assert not out.dropped.global_

    def test_rates_one_equals_null_bundle(self, generator):
        enc = ConditionEncoders()
        bundle = encode_bundle(enc)
        out = enc.apply_condition_dropout(
            bundle, generator, DropoutRates(1.0, 1.0, 1.0, 1.0)
        )
        null = enc.null_bundle()
        assert torch.equal(out.text_emb, null.text_emb)
        assert torch.equal(out.lyric_emb, null.lyric_emb)
        assert torch.equal(out.speaker_emb, null.speaker_emb)
        assert out.dropped.global_ and out.dropped.text

    def test_nulled_flags_compose_with_global(self, generator):
        enc = ConditionEncoders()
        bundle = encode_bundle(enc)
        out = enc.apply_condition_dropout(
            bundle, generator, DropoutRates(1.0, 0.0, 0.0, 0.0)
        )
        assert out.dropped.text_nulled() and out.dropped.lyric_nulled()
        assert out.dropped.speaker_nulled()

    def test_determinism_given_seed(self):
        enc = ConditionEncoders()
        bundle = encode_bundle(enc)
        rates = DropoutRates()
        a = enc.apply_condition_dropout(
            bundle, torch.Generator().manual_seed(11), rates
        )
        b = enc.apply_condition_dropout(
            bundle, torch.Generator().manual_seed(11), rates
        )
        assert a.dropped == b.dropped
        assert torch.equal(a.lyric_emb, b.lyric_emb)

    def test_empirical_rates_within_ci(self):
        enc = ConditionEncoders()
        bundle = encode_bundle(enc)
        rates = DropoutRates()
        gen = torch.Generator().manual_seed(99)
        n = 10000
        counts = {"global": 0, "text": 0, "lyric": 0, "speaker": 0}
        for _ in range(n):
            out = enc.apply_condition_dropout(bundle, gen, rates)
            counts["global"] += out.dropped.global_
            counts["text"] += out.dropped.text
            counts["lyric"] += out.dropped.lyric
            counts["speaker"] += out.dropped.speaker
        for key, rate in (
            ("global", 0.15),
            ("text", 0.15),
            ("lyric", 0.15),
            ("speaker", 0.50),
        ):
            halfwidth = 2.576 * (rate * (1 - rate) / n) ** 0.5
            assert abs(counts[key] / n - rate) < halfwidth, key

    def test_default_rates_match_recipe(self):
        rates = DropoutRates()
        assert (rates.global_, rates.text, rates.lyric, rates.speaker) == (
            0.15,
            0.15,
            0.15,
            0.50,
        )
