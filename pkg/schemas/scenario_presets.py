from schemas.scene_model import DomainSpec, ScenarioSpec

# Saturated flat colors with no sensor effects: the "simulated" look.
_SYNTHETIC = DomainSpec(
    palette=[(0.55, 0.75, 0.95), (0.95, 0.1, 0.1), (0.1, 0.8, 0.1),
             (0.1, 0.2, 0.95), (0.95, 0.85, 0.1)],
    texture_noise_sigma=0.0,
)

# Muted colors with sensor noise: the "real" look, also the clean city domain.
_MUTED = DomainSpec(
    palette=[(0.42, 0.45, 0.43), (0.7, 0.35, 0.3), (0.35, 0.6, 0.35),
             (0.3, 0.38, 0.62), (0.72, 0.66, 0.38)],
    texture_noise_sigma=0.05,
    blur_radius=0.6,
)

SIM2REAL = ScenarioSpec(
    name="sim2real",
    source=_SYNTHETIC,
    target=_MUTED.model_copy(update={
        "gamma": 1.25,
        "white_balance": (1.08, 1.0, 0.86),
        "texture_noise_sigma": 0.07,
    }),
)

ADVERSE_WEATHER = ScenarioSpec(
    name="adverse-weather",
    source=_MUTED,
    target=_MUTED.model_copy(update={
        "fog_density": 1.2,
        "atmospheric_light": 0.85,
    }),
    paired=True,
    fog_levels=[0.6, 1.2, 2.4],
)

CROSS_CAMERA = ScenarioSpec(
    name="cross-camera",
    source=_MUTED,
    target=_MUTED.model_copy(update={
        "gamma": 0.7,
        "white_balance": (0.85, 1.0, 1.2),
        "blur_radius": 1.2,
        "texture_noise_sigma": 0.03,
    }),
)

SCENARIO_PRESETS: dict[str, ScenarioSpec] = {
    spec.name: spec for spec in (SIM2REAL, ADVERSE_WEATHER, CROSS_CAMERA)
}
