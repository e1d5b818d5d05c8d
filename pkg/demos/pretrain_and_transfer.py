"""
Side-classification pre-training and encoder transfer
=====================================================

Trains the siamese encoder on same-side vs opposite-side kidney crops, moves
its weights into the segmentation network, and trains that network next to a
scratch-initialised twin on the same split. Sized to finish in a few minutes
on one CPU core, so the curves are short and noisy.
"""

import torch

from kidney_ssl.models import ArchitectureConfig
from kidney_ssl.phantom import PhantomSpec, generate_case
from kidney_ssl.proxy_data import case_crops, sample_pairs
from kidney_ssl.training import (
    SegCase,
    TrainConfig,
    deterministic_mode,
    split_cases,
    train_proxy,
    train_segmentation,
    transfer_encoder,
)
from kidney_ssl.volume import preprocess_volume

torch.set_num_threads(1)
arch = ArchitectureConfig(growth_rate=4, stem_channels=4, norm_groups=4,
                          decoder_channels=[16, 8, 8, 4])
spec = PhantomSpec(seed=0, dims=(32, 48, 64), right_semi_axes=(5, 7, 5),
                   superior_offset=2, position_jitter=2)

# 20 phantoms, preprocessed in memory, split 16/4 by case
cases = {}
for i in range(20):
    v, m, pad = preprocess_volume(*generate_case(spec, i))
    cases[f"case_{i:03d}"] = (v, m, pad)
train_ids, val_ids = split_cases(sorted(cases), 0.8, seed=0)


def crops(ids):
    return [c for i in ids for c in case_crops(cases[i][0], cases[i][1], (16, 32, 32), i)]


# proxy stage: contrastive loss with margin 1 on balanced pairs
pairs_train = sample_pairs(crops(train_ids), 64, seed=0)
pairs_val = sample_pairs(crops(val_ids), 12, seed=1)
with deterministic_mode():
    siamese_best, proxy_curve = train_proxy(pairs_train, pairs_val, arch,
                                            TrainConfig(epochs=4, seed=0))
print("proxy val accuracy per epoch:",
      [round(a, 3) for a in proxy_curve.column("val_accuracy")])

# transfer: only encoder.* parameters move; the decoders start from the seed
encoder = transfer_encoder(siamese_best)
print(f"transferred {len(encoder)} encoder tensors")


def seg_cases(ids):
    return [SegCase(i, cases[i][0].data, cases[i][1].binary(), cases[i][0].spacing, cases[i][2])
            for i in ids]


# two arms, same split, same decoder init, same data order
curves = {}
for name, init in (("MwS", encoder), ("MwoS", "random")):
    with deterministic_mode():
        _, curves[name] = train_segmentation(seg_cases(train_ids), seg_cases(val_ids), init, arch,
                                             TrainConfig(epochs=4, seed=0))
    print(name, "val DC per epoch:", [round(d, 3) for d in curves[name].column("val_dc")])
