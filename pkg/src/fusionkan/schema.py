"""Feature ordering shared by every module. Changing it invalidates checkpoints."""

FEATURES = (
    "e_l",
    "r_out",
    "m_hat",
    "r_hat",
    "rb_rt",
    "alpha_ifar",
    "cr",
    "v_hat",
    "y_hat",
    "t_ratio",
    "yoc_he",
)
N_PHYSICAL = len(FEATURES)

COMPOSITIONS = ("C0", "C1", "C2", "C3", "C4")
N_COMPOSITIONS = len(COMPOSITIONS)

INPUT_WIDTH = N_PHYSICAL + N_COMPOSITIONS

FEATURE_INDEX = {name: i for i, name in enumerate(FEATURES)}
T_RATIO_INDEX = FEATURE_INDEX["t_ratio"]
YOC_INDEX = FEATURE_INDEX["yoc_he"]

CSV_HEADER = (
    "shot_id",
    "e_l_kj",
    "r_out_um",
    "m_hat",
    "r_hat",
    "rb_rt",
    "alpha_ifar",
    "cr",
    "v_hat",
    "y_hat",
    "t_ratio",
    "yoc_he",
    "composition",
    "y_exp",
)
# CSV column for each physical feature, in FEATURES order
CSV_COLUMNS = dict(zip(FEATURES, CSV_HEADER[1:12]))
