"""Which uninitialised reads does a write-before-read bound catch?

Runs the bundled detection corpus under three enforcement modes and prints
a confusion matrix for each, then re-runs the flagged programs with reads
of unwritten memory turned into zero-fills.

    python demos/detection_table.py
"""

# %%
from monvm.harness import CORPUS_DIR, CaseConfig, auto_init_parity, test_corpus

# %% [markdown]
# Every corpus program is compiled with the same pipeline and run on the
# machine. Under ``nocap`` and ``purecap`` nothing checks initialisation, so
# the bad programs silently read stale bytes.

# %%
for mode in ("nocap", "purecap", "wbr"):
    matrix = test_corpus(CORPUS_DIR, CaseConfig(mode=mode))
    bad = matrix.bad_detected + matrix.bad_missed
    good = matrix.good_passed + matrix.good_flagged
    print(f"{mode:8s} bad trapped {matrix.bad_detected:2d}/{bad}   "
          f"good flagged {matrix.good_flagged}/{good}")

# %% [markdown]
# The two good programs flagged under ``wbr`` copy a struct whose padding was
# never written. The copy is harmless in C but is a read of unwritten bytes.

# %%
matrix = test_corpus(CORPUS_DIR, CaseConfig(mode="wbr"))
for case in matrix.cases:
    if case.verdict == "flagged" or (case.bad and case.id.startswith("scalar")):
        print(f"{case.id:28s} {case.verdict:9s} {case.trap}")

# %% [markdown]
# With auto-init the machine fills each unwritten read with zeros and keeps
# going. The first filled load should sit exactly where the trap was.

# %%
parity = auto_init_parity(CORPUS_DIR)
print(f"\nall complete: {parity.all_complete}   first fill at trap site: {parity.all_parity}")
for row in parity.rows[:5]:
    print(f"  {row.id:28s} parity={row.parity}")
