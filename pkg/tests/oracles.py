"""Independent reference computations shared by unit and acceptance tests."""

import numpy as np

from epcformer import autograd as ag
from epcformer.alignment import build_alignment_batch, project_pooled
from epcformer.autograd import check_gradients
from epcformer.config import Config
from epcformer.encoders import encode_audio, encode_text, encode_visual
from epcformer.eva import evi
from epcformer.head import box_head, decode, dynamic_mask_head_batch, referring_score
from epcformer.losses import total_loss
from epcformer.model import safe_pool
from epcformer.nn import attention
from epcformer.training import TrainItem, compute_losses, loss_weights

TINY = Config(num_samples=12, heldout=4, height=8, width=8, frames=2, objects=2, min_size=2, max_size=3,
              C=8, L=6, P=4, heads=2, queries=3, decoder_layers=1, ffn=8, mlp_hidden=8,
              mask_channels=3, batch_size=2, align_batch=4, train_frames=2)


def single_modality_forward(model, frames, tokens, modality):
    """Forward pass that never builds the other modality.

    ATC reduces to the stream's own self-attention, the referring feature
    to the sum of the interaction and self-attention outputs, and query
    injection to adding that stream's embedding.
    """
    eva, cfg = model.eva, model.config
    f_v = encode_visual(frames, model.encoder)
    enc = encode_text if modality == "text" else encode_audio
    f_x = enc(list(tokens), model.encoder)
    f_e = type(f_x)(f_x.data, "blended", f_x.pad_mask)
    evi_out = evi(f_v, f_e, eva)
    wq, wk, wv = ((eva.w_tq, eva.w_tk, eva.w_tv) if modality == "text" else (eva.w_aq, eva.w_ak, eva.w_av))
    self_att, _ = attention(ag.matmul(f_x.data, wq), ag.matmul(f_x.data, wk), ag.matmul(f_x.data, wv),
                            eva.heads, f_x.pad_mask)
    self_att = ag.mul(self_att, (~f_x.pad_mask)[..., None].astype(float))
    f_r = type(f_x)(ag.add(evi_out.f_e_prime.data, self_att), "referring", f_x.pad_mask)
    e = project_pooled(safe_pool(f_x), model.projection)
    queries = ag.add(model.decoder.query_table, ag.reshape(e, (e.shape[0], 1, e.shape[1])))
    f_ins = decode(evi_out.f_v_prime, queries, model.decoder)
    return {
        "f_e": f_e.data.data,
        "ref": referring_score(f_ins, f_r).data,
        "boxes": box_head(f_ins, model.head).data,
        "masks": dynamic_mask_head_batch(f_ins, evi_out.f_v_prime, model.head, (cfg.height, cfg.width)).data,
    }


def forward_matches(out, ref):
    return (np.array_equal(out.ref_scores.data, ref["ref"]) and np.array_equal(out.boxes.data, ref["boxes"])
            and np.array_equal(out.mask_logits.data, ref["masks"]))


def composed_gradient_errors(model, ds):
    """Finite-difference check of encoder -> EVA -> decoder -> all losses, one item per mode."""
    rng = np.random.default_rng(3)
    s0, s1 = ds[0], ds[1]
    items = [TrainItem(0, 0, 0, s0.expressions[0].tokens, None, "text_only"),
             TrainItem(0, 1, 0, s0.expressions[0].tokens, None, "text_only"),
             TrainItem(1, 0, 1, None, s1.expressions_for(1, "audio")[0].tokens, "audio_only"),
             TrainItem(1, 1, 1, s1.expressions_for(1, "text")[0].tokens,
                       s1.expressions_for(1, "audio")[0].tokens, "both")]
    align = build_alignment_batch(ds, 4, rng)
    _, matchings, _ = compute_losses(model, ds, items, rng, True, None, align)

    def fn():
        parts, _, _ = compute_losses(model, ds, items, rng, True, matchings, align)
        return total_loss(parts, loss_weights(model.config))

    return check_gradients(fn, model.parameters(), max_entries=4, rng=rng)
