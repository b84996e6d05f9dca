import pytest
import torch

from manetlab.encoders import (TextEncoder, VisualEncoder, WordEmbedding, embed_words, encode_image,
                               encode_text, reverse_valid, valid_mask)
from manetlab.model import FULL_DIMS


def test_embed_words_selects_rows():
    w = torch.randn(10, 4)
    out = embed_words(torch.tensor([7]), w)
    assert torch.equal(out[:, 0], w[7])
    tokens = torch.randint(0, 10, (24,))
    out = embed_words(tokens, torch.randn(10, 32))
    assert out.shape == (32, 24)


def test_embed_words_padding_and_range():
    emb = WordEmbedding(10, 5)
    assert torch.equal(emb.weight[0], torch.zeros(5))
    assert torch.equal(emb(torch.zeros(6, dtype=torch.long)), torch.zeros(5, 6))
    with pytest.raises(IndexError):
        embed_words(torch.tensor([10]), emb.weight)
    with pytest.raises(IndexError):
        embed_words(torch.tensor([-1]), emb.weight)


def test_padding_row_receives_no_gradient():
    emb = WordEmbedding(6, 3)
    out = emb(torch.tensor([[0, 2, 0, 5]]))
    out.sum().backward()
    assert torch.equal(emb.weight.grad[0], torch.zeros(3))
    assert emb.weight.grad[2].abs().sum() > 0


def test_reverse_valid():
    x = torch.arange(10.0).reshape(2, 5, 1)
    out = reverse_valid(x, torch.tensor([3, 5]))[..., 0]
    assert out.tolist() == [[2, 1, 0, 3, 4], [9, 8, 7, 6, 5]]


def _encoder(seed=0, d_e=5, hidden=4):
    torch.manual_seed(seed)
    return TextEncoder(d_e, hidden)


def test_text_encoder_zero_length_and_padding():
    enc = _encoder()
    emb = torch.randn(2, 5, 7)
    out = enc(emb, torch.tensor([0, 4]))
    assert torch.equal(out[0], torch.zeros(4, 7))
    assert torch.equal(out[1, :, 4:], torch.zeros(4, 3))


def test_text_encoder_padding_content_irrelevant():
    enc = _encoder()
    emb = torch.randn(1, 5, 7)
    other = emb.clone()
    other[..., 4:] = torch.randn(1, 5, 3)
    lengths = torch.tensor([4])
    assert torch.allclose(enc(emb, lengths), enc(other, lengths))


def test_text_encoder_single_token_is_mean_of_directions():
    enc = _encoder()
    emb = torch.randn(5, 6)
    out = encode_text(emb, 1, enc)
    x = emb[:, 0][None]
    h0 = torch.zeros(1, 4)
    expected = 0.5 * (enc.forward_cell(x, h0) + enc.backward_cell(x, h0))[0]
    assert torch.allclose(out[:, 0], expected, atol=1e-6)
    assert torch.equal(out[:, 1:], torch.zeros(4, 5))


def test_text_encoder_reversal_with_swapped_cells():
    enc = _encoder(1)
    swapped = TextEncoder(5, 4)
    swapped.forward_cell.load_state_dict(enc.backward_cell.state_dict())
    swapped.backward_cell.load_state_dict(enc.forward_cell.state_dict())
    emb = torch.randn(1, 5, 8)
    lengths = torch.tensor([6])
    out = enc(emb, lengths)
    rev_in = reverse_valid(emb.transpose(1, 2), lengths).transpose(1, 2)
    rev_out = swapped(rev_in, lengths)
    assert torch.allclose(reverse_valid(rev_out.transpose(1, 2), lengths).transpose(1, 2), out, atol=1e-6)


def test_text_encoder_directions_distinct_params():
    enc = _encoder()
    assert enc.forward_cell.weight_ih is not enc.backward_cell.weight_ih
    assert not torch.equal(enc.forward_cell.weight_ih, enc.backward_cell.weight_ih)


def test_text_encoder_rejects_bad_lengths():
    enc = _encoder()
    with pytest.raises(ValueError):
        enc(torch.randn(1, 5, 4), torch.tensor([5]))
    with pytest.raises(ValueError):
        encode_text(torch.randn(5, 4), 5, enc)


def test_valid_mask():
    assert valid_mask(torch.tensor([0, 2]), 3).tolist() == [[False, False, False], [True, True, False]]


def test_visual_encoder_toy_shape():
    enc = VisualEncoder(3, (32, 64), (48, 16), convs_per_stage=2)
    assert enc.output_size == (12, 4)
    out = encode_image(torch.rand(3, 48, 16), enc)
    assert out.shape == (64, 12, 4)


def test_visual_encoder_zero_image_gives_zero_map():
    enc = VisualEncoder(3, (32, 64), (48, 16), convs_per_stage=2).eval()
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
                m.bias.zero_()
    assert torch.equal(enc(torch.zeros(2, 3, 48, 16)), torch.zeros(2, 64, 12, 4))


def test_visual_encoder_full_size_shape():
    enc = VisualEncoder(3, FULL_DIMS.backbone_widths,
                        (FULL_DIMS.image_height, FULL_DIMS.image_width), FULL_DIMS.convs_per_stage)
    assert enc.output_size == (24, 8)
    assert enc.out_channels == 2048


def test_visual_encoder_deterministic_and_shape_checked():
    enc = VisualEncoder().eval()
    x = torch.rand(1, 3, 48, 16)
    assert torch.equal(enc(x), enc(x))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 40, 16))
