"""
Constant variables for groundgenie package.
Defaults that the modules share live here; module-specific tuning knobs stay
next to the code that uses them.
"""

PKG_NAME = "groundgenie"

EVAL_CMD = "eval"
PARSE_CMD = "parse"
SIMULATE_CMD = "simulate"
PATHOLOGY_CMD = "pathology"
ENGINE_CMD = "engine"
MATCH_CMD = "match"

SUBPARSER_MESSAGES = {
    EVAL_CMD: "Evaluate detections against COCO-style ground truth.",
    PARSE_CMD: "Parse a grounded answer into detections.",
    SIMULATE_CMD: "Run retrieval vs regression desk simulations.",
    PATHOLOGY_CMD: "Scan model outputs for repetition and truncation.",
    ENGINE_CMD: "Run or resume the annotation data engine.",
    MATCH_CMD: "Assign predictions to ground truth with the matching cost.",
}

SIM_QUANT = "quant"
SIM_RETRIEVAL = "retrieval"
SIM_COMPARE = "compare"
SIM_KINDS = [SIM_QUANT, SIM_RETRIEVAL, SIM_COMPARE]

ENGINE_RUN = "run"
ENGINE_RESUME = "resume"
ENGINE_ACTIONS = [ENGINE_RUN, ENGINE_RESUME]

MODE_SCORED = "scored"
MODE_UNSCORED = "unscored"
EVAL_MODES = [MODE_SCORED, MODE_UNSCORED]

# exit codes
EXIT_OK = 0
EXIT_WARN = 1
EXIT_INPUT_ERROR = 2

CFG_ENV_VARS = ["GROUNDGENIE_CONFIG"]
ENDPOINT_ENV_VAR = "GROUNDGENIE_ENDPOINT"

# config sections
CFG_EVAL_KEY = "eval"
CFG_MATCHING_KEY = "matching"
CFG_PATHOLOGY_KEY = "pathology"
CFG_ENGINE_KEY = "engine"
CFG_SIMULATE_KEY = "simulate"

# grounding protocol
MAX_OBJECTS = 100
IOU_THRESHOLD = 0.5
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101

FREQ_RARE = "rare"
FREQ_COMMON = "common"
FREQ_FREQUENT = "frequent"
FREQUENCIES = [FREQ_RARE, FREQ_COMMON, FREQ_FREQUENT]
# LVIS stores the frequency as a single letter
FREQ_ABBREVIATIONS = {"r": FREQ_RARE, "c": FREQ_COMMON, "f": FREQ_FREQUENT}

TOKENS_PER_BOX = 9
REPORT_DECIMALS = 4

RECORD_HEADER = "# groundgenie {kind} v1"
