from .features import (HISTORY_LEN, NODE_FEATURE_WIDTH, REFINE_FEATURE_WIDTH,
                       STEP_FEATURE_WIDTH, expanded_node_features,
                       node_features, refine_features)
from .network import CONSTRUCT, REFINE, Policy, PolicyConfig
from .rollout import (ConstructResult, RefineResult, Trajectory, pad_routes,
                      rollout_construct, rollout_refine,
                      teacher_forced_log_prob)
