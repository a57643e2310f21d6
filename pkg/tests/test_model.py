import math

import numpy as np
import pytest
import torch

from lofi.losses import caption_seq, ground_seq
from lofi.model import (
    ContextOverflow,
    DecoderSeq,
    ImageRef,
    LoFiModel,
    LoRALinear,
    LoraSpec,
    ModelConfig,
    Tokenizer,
    apply_lora,
    decoder_logits,
    decoder_logprob,
    encode_image,
    encode_text,
    expected_lora_param_count,
    file_digest,
    generate,
    load_checkpoint,
    lora_parameters,
    merge_lora,
    pack,
    save_checkpoint,
    sincos_2d,
)

from conftest import tiny_config, tiny_model

SENT = "there is a small bright circle in the upper-left region ."


# --- tokenizer


def test_tokenizer_roundtrip_and_box_symbols():
    tok = Tokenizer()
    assert tok.decode(tok.encode(SENT)) == SENT
    ids = tok.encode("[100,200,500,750]")
    assert len(ids) == 17
    assert tok.decode(ids) == "[100,200,500,750]"
    assert tok.vocab[:4] == ["<pad>", "<bos>", "<eos>", "<sep>"]


def test_tokenizer_rejects_unknown_words():
    with pytest.raises(ValueError):
        Tokenizer().encode("there is a zebra")


def test_decode_skips_specials():
    tok = Tokenizer()
    assert tok.decode([tok.pad_id, *tok.encode("there is"), tok.eos_id]) == "there is"


# --- encoders


def test_embeddings_unit_norm(model, images):
    emb, pooled = model.encode_images(images)
    assert torch.allclose(emb.norm(dim=-1), torch.ones(3, dtype=emb.dtype), atol=1e-5)
    assert pooled.shape == (3, 4, 16)
    t = model.encode_texts([SENT, "there is a large dark ring in the center region ."])
    assert torch.allclose(t.norm(dim=-1), torch.ones(2, dtype=t.dtype), atol=1e-5)


def test_pooled_count_independent_of_resolution():
    for size in ((128, 128), (64, 96)):
        torch.manual_seed(0)
        m = LoFiModel(ModelConfig(image_size=size, image_blocks=1, text_blocks=1, dec_blocks=1))
        _, pooled = encode_image(m, np.zeros(size, dtype=np.float32))
        assert pooled.shape == (64, 64)


def test_wrong_image_size_errors(model):
    with pytest.raises(ValueError):
        model.encode_images(np.zeros((1, 16, 16)))


def test_encoders_deterministic(model, images):
    a = encode_image(model, images[0])
    b = encode_image(model, images[0])
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert torch.equal(encode_text(model, SENT), encode_text(model, SENT))


def test_long_text_truncated(model):
    long = " ".join(["there is a circle ."] * 20)  # 100 tokens
    assert len(model.tokenizer.encode(long)) == 100
    ids, valid = model.text_batch([long])
    assert ids.shape == (1, 64)
    z = encode_text(model, long)
    assert torch.isfinite(z).all()
    with pytest.raises(ValueError):
        encode_text(model, "")


def test_sincos_positions_distinct():
    p = sincos_2d(8, 8, 64)
    assert p.shape == (64, 64)
    assert torch.cdist(p, p).add(torch.eye(64) * 10).min() > 0.1
    with pytest.raises(ValueError):
        tiny_model(image_pos="nope")


# --- decoder


def _uniform(model):
    with torch.no_grad():
        model.decoder.lm_head.weight.zero_()
        model.decoder.lm_head.bias.zero_()
    return model


def _bank(model, images):
    return model.encode_images(images)[1]


def test_uniform_logits_give_length_times_log_vocab(model, images):
    _uniform(model)
    v = len(model.tokenizer)
    target = model.tokenizer.encode(SENT)
    seq = caption_seq(model, ImageRef(0), SENT)
    lp = decoder_logprob(model, seq, _bank(model, images)).detach()
    assert float(lp) == pytest.approx(-(len(target) + 1) * math.log(v), rel=1e-12)


def test_empty_target_logprob_zero(model, images):
    seq = DecoderSeq(caption_seq(model, ImageRef(0), SENT).blocks, [])
    assert decoder_logprob(model, seq, _bank(model, images)).item() == 0.0


def test_appending_never_increases_logprob(model, images):
    bank = _bank(model, images)
    blocks = caption_seq(model, ImageRef(1), SENT).blocks
    target = model.tokenizer.encode(SENT)
    prev = 0.0
    for n in range(1, len(target) + 1):
        lp = decoder_logprob(model, DecoderSeq(blocks, target[:n]), bank).item()
        assert lp <= prev + 1e-12
        prev = lp


def test_batched_logprob_matches_single(model, images):
    from lofi.model import sequence_logprobs

    bank = _bank(model, images)
    seqs = [caption_seq(model, ImageRef(0), SENT),
            ground_seq(model, ImageRef(2), SENT, [(100, 200, 300, 400), (0, 0, 10, 10)])]
    lp, n = sequence_logprobs(model, seqs, bank)
    for i, s in enumerate(seqs):
        assert lp[i].item() == pytest.approx(decoder_logprob(model, s, bank).item(), abs=1e-10)
        assert int(n[i]) == len(s.target)


def test_causality(model, images):
    bank = _bank(model, images)
    seq = ground_seq(model, ImageRef(0), SENT, [(100, 200, 300, 400)])
    base, _, _ = decoder_logits(model, [seq], bank)
    start = seq.cond_length(model.cfg.n_queries)
    for t in range(len(seq.target)):
        tgt = list(seq.target)
        tgt[t] = (tgt[t] + 1) % len(model.tokenizer)
        pert, _, _ = decoder_logits(model, [DecoderSeq(seq.blocks, tgt)], bank)
        pos = start + t
        assert torch.equal(base[0, :pos], pert[0, :pos])
        assert not torch.equal(base[0, pos], pert[0, pos])


def test_logprob_gradient_matches_finite_differences(model, images):
    bank_fn = lambda: _bank(model, images)  # noqa: E731
    seq = ground_seq(model, ImageRef(1), SENT, [(100, 200, 300, 400)])
    model.zero_grad()
    decoder_logprob(model, seq, bank_fn()).backward()
    params = [p for p in model.parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(10):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        g = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            up = float(decoder_logprob(model, seq, bank_fn()))
            p[idx] = orig - eps
            down = float(decoder_logprob(model, seq, bank_fn()))
            p[idx] = orig
        fd = (up - down) / (2 * eps)
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g)) + 1e-8


def test_left_padding_and_positions(model):
    tok = model.tokenizer
    a = DecoderSeq([[ImageRef(0), [5, 6]], [ImageRef(1), [7]]], [8, 9])
    b = DecoderSeq([[[5]]], [8])
    ids, img, pos, valid, tmask = pack([a, b], 4, tok.pad_id, 160)
    assert ids.shape == (2, 13)
    assert valid[1].tolist() == [False] * 11 + [True, True]
    # positions restart per block and the target continues the last one
    assert pos[0].tolist() == [0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5, 6]
    assert img[0, :4].tolist() == [0, 1, 2, 3] and img[0, 6:10].tolist() == [4, 5, 6, 7]
    assert tmask[0].nonzero().flatten().tolist() == [10, 11]
    assert tmask[1].nonzero().flatten().tolist() == [11]


def test_context_overflow(model):
    with pytest.raises(ContextOverflow):
        pack([DecoderSeq([[list(range(200))]], [])], 4, 0, 160)


def _greedy_oracle(model, seq, bank, max_len):
    """Recompute full teacher-forced logits at every step (no cache)."""
    out = []
    for _ in range(max_len):
        logits, _, _ = decoder_logits(model, [DecoderSeq(seq.blocks, out)], bank)
        tok = int(logits[0, -1].argmax())
        if tok == model.tokenizer.eos_id:
            break
        out.append(tok)
    return out


def test_generate_matches_uncached_greedy(images):
    model = tiny_model(seed=3)
    bank = _bank(model, images)
    seqs = [caption_seq(model, ImageRef(i), SENT) for i in range(3)]
    seqs.append(DecoderSeq([[ImageRef(1), [5]], [ImageRef(0), [6, 7, 3]]], []))
    with torch.no_grad():
        got = generate(model, seqs, bank, 12)
        for s, g in zip(seqs, got):
            assert g == _greedy_oracle(model, s, bank, 12)
    assert generate(model, seqs, bank, 12) == got
    assert generate(model, seqs, bank, 0) == [[]] * 4


def test_generate_stops_at_eos(images):
    model = tiny_model()
    with torch.no_grad():
        model.decoder.lm_head.bias[model.tokenizer.eos_id] = 100.0
    assert generate(model, [caption_seq(model, ImageRef(0), SENT)], _bank(model, images), 5) == [[]]


# --- LoRA


def test_lora_zero_init_is_identical(images):
    base = tiny_model(double=False)
    spec = LoraSpec(encoder_rank=4, decoder_rank=2)
    lora = apply_lora(base, spec, seed=1)
    imgs = images.astype(np.float32)
    seq = ground_seq(base, ImageRef(0), SENT, [(1, 2, 3, 4)])
    with torch.no_grad():
        for m in (base, lora):
            m.eval()
        eb, pb = base.encode_images(imgs)
        el, pl = lora.encode_images(imgs)
        assert torch.equal(eb, el) and torch.equal(pb, pl)
        assert torch.equal(base.encode_texts([SENT]), lora.encode_texts([SENT]))
        assert torch.equal(decoder_logits(base, [seq], pb)[0], decoder_logits(lora, [seq], pl)[0])


def test_lora_trainable_set_and_count():
    base = LoFiModel(ModelConfig())
    spec = LoraSpec()
    lora = apply_lora(base, spec)
    n = sum(p.numel() for p in lora_parameters(lora))
    # image + text encoders: 2 blocks each, q/k/v/o at rank 16 on 64x64;
    # decoder: 4 blocks, q/v at rank 4 on 64x64
    assert n == 2 * 2 * 4 * 16 * (64 + 64) + 4 * 2 * 4 * (64 + 64) == 36864
    assert n == expected_lora_param_count(base, spec)
    trainable = {name for name, p in lora.named_parameters() if p.requires_grad}
    for name in trainable:
        assert "lora_" in name or name.startswith(("pooler.", "projection."))
    assert any(name.startswith("pooler.") for name in trainable)
    assert all(not p.requires_grad for name, p in lora.named_parameters() if name.endswith("base.weight"))
    assert all(p.requires_grad for p in base.parameters())


def test_lora_rank_too_large():
    with pytest.raises(ValueError):
        apply_lora(tiny_model(), LoraSpec(encoder_rank=17, decoder_rank=2))
    with pytest.raises(ValueError):
        LoRALinear(torch.nn.Linear(8, 4), 5, 1.0)


def test_lora_merge_equivalence(images):
    lora = apply_lora(tiny_model(double=False), LoraSpec(encoder_rank=4, decoder_rank=2, scaling=0.5))
    with torch.no_grad():
        for p in lora_parameters(lora):
            p.normal_(0, 0.2)
    merged = merge_lora(lora)
    imgs = images.astype(np.float32)
    seq = ground_seq(lora, ImageRef(0), SENT, [(1, 2, 3, 4)])
    with torch.no_grad():
        el, pl = lora.encode_images(imgs)
        em, pm = merged.encode_images(imgs)
        assert (el - em).abs().max() <= 1e-5 and (pl - pm).abs().max() <= 1e-5
        assert (lora.encode_texts([SENT]) - merged.encode_texts([SENT])).abs().max() <= 1e-5
        dl = decoder_logits(lora, [seq], pl)[0]
        dm = decoder_logits(merged, [seq], pm)[0]
        assert (dl - dm).abs().max() <= 1e-5
        assert not torch.equal(el, tiny_model(double=False).encode_images(imgs)[0])
    assert not lora_parameters(merged)


# --- checkpoints


def test_checkpoint_roundtrip(tmp_path, images):
    m = tiny_model(double=False)
    d1 = save_checkpoint(tmp_path / "a.ckpt", m, {"k": 1}, "text: 1\n")
    d2 = save_checkpoint(tmp_path / "b.ckpt", m, {"k": 1}, "text: 1\n")
    assert d1 == d2 == file_digest(tmp_path / "a.ckpt")
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta["config"] == {"k": 1} and meta["config_text"] == "text: 1\n"
    for k, v in m.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


def test_checkpoint_lora_roundtrip(tmp_path):
    m = apply_lora(tiny_model(double=False), LoraSpec(encoder_rank=2, decoder_rank=2))
    save_checkpoint(tmp_path / "l.ckpt", m, {})
    back, meta = load_checkpoint(tmp_path / "l.ckpt")
    assert meta["lora"]["encoder_rank"] == 2
    assert set(back.state_dict()) == set(m.state_dict())


def test_checkpoint_validation(tmp_path):
    import io
    import json
    import zipfile

    m = tiny_model(double=False)
    save_checkpoint(tmp_path / "a.ckpt", m, {})
    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        files = {n: zf.read(n) for n in zf.namelist()}

    def rewrite(name, mutate):
        f = dict(files)
        mutate(f)
        with zipfile.ZipFile(tmp_path / name, "w") as zf:
            for k, v in f.items():
                zf.writestr(k, v)
        return tmp_path / name

    def bad_version(f):
        meta = json.loads(f["meta.json"])
        meta["version"] = "other"
        f["meta.json"] = json.dumps(meta).encode()

    def bad_shape(f):
        key = next(k for k in f if k.startswith("params/decoder.lm_head.weight"))
        b = io.BytesIO()
        np.save(b, np.zeros((2, 2), dtype=np.float32))
        f[key] = b.getvalue()

    def missing(f):
        del f[next(k for k in f if k.startswith("params/"))]

    for mut in (bad_version, bad_shape, missing):
        with pytest.raises(ValueError):
            load_checkpoint(rewrite(mut.__name__ + ".ckpt", mut))


def test_literal_sigmoid_mode():
    m = LoFiModel(tiny_config(sigmoid_mode="literal"))
    assert float(m.logit_scale) == 1.0 and float(m.logit_bias) == 0.0
    assert not m.log_logit_scale.requires_grad and not m.logit_bias.requires_grad
    learned = LoFiModel(tiny_config())
    assert learned.logit_scale.item() == pytest.approx(10.0) and learned.logit_bias.item() == -10.0
