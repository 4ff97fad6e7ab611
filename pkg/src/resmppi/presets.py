"""Planner and dynamics-training presets.

The ``reference`` presets record published hyperparameters for the MuJoCo and racing
experiments. They are shipped for documentation and for building configs; the desk
environments here are far smaller, so the ``desk`` presets are tuned separately.
"""

REFERENCE_PLANNER = {
    "halfcheetah": {"horizon": 2, "n_samples": 10000, "sigma": 0.017, "omega_prime": 1e-7, "gamma": 0.9, "temperature": 5e-5},
    "ant": {"horizon": 5, "n_samples": 5000, "sigma": 0.005, "omega_prime": 1e-2, "gamma": 0.9, "temperature": 5e-3},
    "swimmer": {"horizon": 5, "n_samples": 5000, "sigma": 0.02, "omega_prime": 1e-4, "gamma": 0.9, "temperature": 1e-4},
    "hopper": {"horizon": 8, "n_samples": 10000, "sigma": 0.005, "omega_prime": 2e-7, "gamma": 0.9, "temperature": 1e-5},
    "racing": {"horizon": 15, "n_samples": 500, "sigma": 0.035, "top_ratio": 0.048, "omega_prime": 3.0, "gamma": 0.8, "temperature": 0.5},
}

REFERENCE_DYNAMICS = {
    "mujoco": {"hidden": [256, 256, 256, 256], "activation": "mish", "learning_rate": 1e-5, "batch_size": 256,
               "window": 8, "gamma": 0.9, "training_frequency": 10, "total_samples": 200000, "capacity": 50000},
    "racing": {"hidden": [2048, 2048, 2048], "activation": "mish", "learning_rate": 1e-5, "batch_size": 256,
               "steps": 200000, "window": 5, "gamma": 1.0, "training_frequency": 5, "history_length": 8,
               "capacity": 2000000},
}

# Off-course penalty coefficient used in the racing experiments; the desk car defaults to 1e4.
REFERENCE_OFFCOURSE_COEF = 1e6

DESK_PLANNER = {
    "point_mass": {"horizon": 2, "n_samples": 256, "sigma": 0.5, "omega_prime": 0.09, "gamma": 1.0, "temperature": 0.01},
    "point_mass_oracle": {"horizon": 2, "n_samples": 1024, "sigma": 1.5, "omega_prime": 0.1, "gamma": 1.0, "temperature": 0.1},
    "pendulum": {"horizon": 10, "n_samples": 256, "sigma": 0.5, "omega_prime": 0.05, "gamma": 0.95, "temperature": 0.05},
    "car": {"horizon": 15, "n_samples": 256, "sigma": [0.05, 0.5], "omega_prime": 1.0, "gamma": 0.9, "temperature": 100.0},
}

DESK_DYNAMICS = {
    "point_mass": {"hidden": [64, 64], "activation": "mish", "learning_rate": 3e-2, "final_learning_rate": 1e-5,
                   "batch_size": 64, "steps": 20000, "window": 8, "gamma": 0.9},
    "car": {"hidden": [64, 64], "activation": "mish", "learning_rate": 1e-2, "final_learning_rate": 1e-5,
            "batch_size": 64, "steps": 3000, "window": 8, "gamma": 0.9},
}

PLANNER_PRESETS = {**{f"reference/{k}": v for k, v in REFERENCE_PLANNER.items()},
                   **{f"desk/{k}": v for k, v in DESK_PLANNER.items()}}


def planner_preset(name):
    try:
        return dict(PLANNER_PRESETS[name])
    except KeyError:
        raise KeyError(f"unknown planner preset {name!r}; known: {sorted(PLANNER_PRESETS)}") from None
