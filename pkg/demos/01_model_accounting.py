"""Walk through the detector graphs and their parameter / multi-add budgets.

Nothing here needs weights: every count comes from the layer list.
"""

from yoloob.arch import build_network, count_multiadds, count_params, summary_table

# The default detector at 416x416: DarkNet53, SPP, one fusion layer, anchor-free head.
g = build_network()
print(summary_table(g).split("\n\n")[0][:2000])  # first rows of the layer table
print("...")

for name in ("F52", "F26", "F13", "SPP", "F'13", "F'26", "F'52"):
    print(f"{name:>5}: {g.tap_shape(name)}")

# Ablation variants side by side
variants = {
    "yolo-ob": {},
    "yolo-ob, anchor head": {"head": "anchor"},
    "two fusion layers, anchor head": {"bispfpn_layers": 2, "head": "anchor"},
    "yolov3 baseline": {"model": "yolov3-baseline", "head": "anchor"},
}
print(f"\n{'variant':<34}{'params (M)':>12}{'multi-adds @16 (G)':>20}")
for label, kw in variants.items():
    gv = build_network(**kw)
    print(f"{label:<34}{count_params(gv).params_m:>12.2f}{count_multiadds(gv, 16).multi_adds_g:>20.2f}")

# Where do the parameters live?
per = count_params(g).per_layer
groups = {}
for c in per:
    key = c.name.split(".")[0]
    groups[key] = groups.get(key, 0) + c.params
print()
for k, v in groups.items():
    print(f"{k:<12}{v / 1e6:8.2f}M")

# The reduced preset used for CPU training
r = build_network(preset="reduced")
print(f"\nreduced preset: input {r.input_size}, {count_params(r).params_m:.2f}M params, "
      f"{count_multiadds(r, 1).multi_adds_g:.3f}G multi-adds per image")
