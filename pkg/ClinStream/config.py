"""
Configuration file to store global default parameters
"""

# standard libraries
import os

# location of the shipped data files (templates, vocabularies, demo scripts)
data_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

# event bundling
bundle_params = {"window_hours": 1, "gap_threshold_hours": 6}

# prompt budget allocations, in the configured token unit
budget_params = {
    "system": 400,
    "rules": 600,
    "state": 500,
    "buffer": 1500,
    "reflection": 2000,
}

# online loop parameters
loop_params = {
    "tau_uncertainty": 0.7,
    "l_limit": 1500,  # buffer size that triggers a Steward pass
    "max_candidates": 3,  # Router cap on |C_t|
    "router_lookback_hours": 6,
    "max_actions": 5,  # predicted actions retained for scoring
}

# chat backend
backend_params = {
    "kind": "mock",  # "mock" or "http"
    "endpoint": "http://localhost:8000/v1",
    "model": "default",
    "api_key_env": "CLINSTREAM_API_KEY",
    "timeout_ms": 60000,
    "retries": 3,  # maximum network attempts per call
    "backoff_s": 0.5,
    "temperature": 0.0,
    "max_output_tokens": 512,
    "mock_script": os.path.join(data_dir, "mock_scripts", "sepsis_demo.jsonl"),
}

# component ablations
ablation_params = {
    "use_global_protocol": True,
    "use_mitosis": True,
    "use_auditor": True,
}

# evaluation
eval_params = {
    "k": 5,
    "aliases": {},  # optional alias pairs for action matching
}

# file locations
path_params = {
    "schema_map": os.path.join(data_dir, "schema_map.yaml"),
    "panels": os.path.join(data_dir, "panels.yaml"),
    "risk_vocab": os.path.join(data_dir, "risk_vocab.txt"),
    "templates": os.path.join(data_dir, "templates"),
    "corpus": None,
    "protocol": None,
    "out": "clinstream_out",
}

# patterns screened out of induced rules, in addition to the corpus stay ids
identifier_patterns = [r"\b\d{8}\b"]

# seed for synthetic corpora; the inference path uses no randomness
seed = 0

# parallelization
numcores = 1  # defaults to serial

# environment prefix for layered configuration
env_prefix = "CLINSTREAM_"
