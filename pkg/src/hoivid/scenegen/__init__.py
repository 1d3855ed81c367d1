"""Synthetic hand-object scenes: specs, motion scripts, renderer and persistence."""

from .io import dump_frames, load_sample, read_ppm, save_sample, write_ppm
from .render import (
    DISTRACTOR,
    HAND,
    OBJECT,
    Box,
    Camera,
    RenderResult,
    SceneState,
    Sphere,
    coverage,
    intersect,
    render_frame,
)
from .scene import (
    MOTIONS,
    SHAPES,
    Distractor,
    Pose,
    SceneError,
    SceneSample,
    SceneSpec,
    generate_scene,
    hand_spheres,
    make_cross_condition,
    mirrored_spec,
    motion_pose,
    random_spec,
    sample_surface_points,
    scene_state,
    validate_spec,
)
