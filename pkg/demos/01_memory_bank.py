"""Build a visual memory bank from grounding annotations.

Walks through the construction pipeline step by step: small-box filtering,
duplicate merging, blur-based quality filtering, and key/value embedding,
then saves the bank and reads it back.

Run: python3 demos/01_memory_bank.py
"""

import tempfile

import numpy as np

from vismem import (
    BankBuildConfig,
    Box2D,
    GroundingRecord,
    HashingProvider,
    build_bank,
    load_bank,
    save_bank,
)

rng = np.random.Generator(np.random.PCG64(0))

# A provider maps strings to embeddings. The hashing provider derives
# deterministic unit vectors from the strings themselves, so no model
# weights are needed; real deployments would plug in precomputed CLIP-style
# tables instead. Feature grids supply the pooled region values.
d_key, d_val = 64, 32
features = {
    f"img{i}": rng.standard_normal((8, 8, d_val)).astype(np.float32)
    for i in range(6)
}
provider = HashingProvider(d_key=d_key, d_val=d_val, seed=0, feature_table=features)

# Synthesize some grounded phrase-region annotations, including a degenerate
# tiny box and an exact duplicate so the filters have something to do.
records = []
for i in range(30):
    # boxes are stored as float32 on disk; use representable coordinates so
    # the round-trip comparison below is exact
    x0, y0 = (float(np.float32(v)) for v in rng.uniform(0.0, 0.4, 2))
    records.append(GroundingRecord(
        image_id=f"img{i % 6}",
        box=Box2D(x0, y0, float(np.float32(x0 + 0.3)), float(np.float32(y0 + 0.3))),
        phrase=["mug", "laptop", "plant"][i % 3],
        scene="office desk",
        blur_score=float(rng.uniform(0.2, 8.0)),
    ))
records.append(GroundingRecord("img0", Box2D(0.5, 0.5, 0.502, 0.502), "mug",
                               "office desk", blur_score=5.0))   # too small
records.append(GroundingRecord(records[0].image_id, records[0].box,
                               records[0].phrase, "office desk", blur_score=5.0))

bank = build_bank(records, provider, BankBuildConfig())

print("construction manifest (input = output + removals):")
for key, value in bank.manifest.items():
    print(f"  {key}: {value}")

entry = bank.entries[0]
print(f"\nfirst entry: category={entry.category!r} image={entry.image_id!r}")
print(f"  key norm   = {np.linalg.norm(entry.key):.6f} (unit by construction)")
print(f"  value norm = {np.linalg.norm(entry.value):.6f}")

# Banks round-trip bit-exactly through the on-disk format.
with tempfile.NamedTemporaryFile(suffix=".pbnk") as f:
    save_bank(bank, f.name)
    reloaded = load_bank(f.name)
    print(f"\nsaved and reloaded: {len(reloaded)} entries, equal to original:",
          reloaded == bank)
