"""Why copies of a conditional capability need to be kept in step.

A store through one register advances that register's operation top. Any
other copy of the capability (a spill slot, a loop-carried value saved in
memory) still has the old top and will refuse to read what was just
written. The linearization pass gives each conditional value one home.

    python demos/linearization.py
"""

# %%
from monvm import BuildOptions, assemble, build, interpret, parse_mir, run
from monvm.harness import data_path

source = data_path("partial_init.mir").read_text()
print(source)

# %% [markdown]
# The reference interpreter tracks which bytes were written, not
# capabilities, so it defines what the program ought to do.

# %%
module = parse_mir(source)
reference = interpret(module)
print("interpreter:", reference.status, reference.output)

# %%
for linearize in (False, True):
    for registers in (8, 64):
        asm = build(module, BuildOptions(linearize=linearize, registers=registers))
        result = run(assemble(asm))
        verdict = result.trap or f"EXIT {result.exit_code} output={result.output}"
        print(f"linearize={linearize!s:5s} K={registers:2d}: {verdict}")

# %% [markdown]
# More registers do not help: the stale copy sits in the array's home slot,
# not in a spill. The linearized build keeps the refreshed capability there.

# %%
asm = build(module, BuildOptions(emit_comments=True))
print("\n".join(ln for ln in asm.splitlines() if "refresh" in ln or "escape" in ln))
