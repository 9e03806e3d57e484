"""Affordance label scheme: background plus six affordance classes."""

BACKGROUND = 0
GRASP = 1
CUT = 2
SCOOP = 3
CONTAIN = 4
POUND = 5
WRAP_GRASP = 6

NUM_CLASSES = 7
AFFORDANCE_IDS = (GRASP, CUT, SCOOP, CONTAIN, POUND, WRAP_GRASP)

NAMES = {
    BACKGROUND: "background",
    GRASP: "grasp",
    CUT: "cut",
    SCOOP: "scoop",
    CONTAIN: "contain",
    POUND: "pound",
    WRAP_GRASP: "w-grasp",
}
IDS = {name: idx for idx, name in NAMES.items()}

# focal-loss class balance weights, indexed by label
DEFAULT_ALPHA = (0.03, 0.12, 0.17, 0.21, 0.17, 0.2, 0.1)


def name_of(label: int) -> str:
    return NAMES[int(label)]


def parse(label) -> int:
    """Accept an integer label or an affordance name."""
    if isinstance(label, str):
        try:
            return IDS[label]
        except KeyError:
            raise ValueError(f"unknown affordance name {label!r}") from None
    label = int(label)
    if label not in NAMES:
        raise ValueError(f"label {label} outside 0..6")
    return label
