from greaten.synthdata.scene import (
    EllipsoidSpec,
    PlaneSpec,
    RenderResult,
    SceneConfig,
    StereoSample,
    TextureSpec,
    generate_scene,
    render_scene,
)
from greaten.synthdata.geometry import normals_from_disparity, occlusion_from_disparity
from greaten.synthdata.sample_io import (
    SampleFormatError,
    read_pfm,
    read_sample,
    write_pfm,
    write_sample,
)

__all__ = [
    "EllipsoidSpec",
    "PlaneSpec",
    "RenderResult",
    "SampleFormatError",
    "SceneConfig",
    "StereoSample",
    "TextureSpec",
    "generate_scene",
    "normals_from_disparity",
    "occlusion_from_disparity",
    "read_pfm",
    "read_sample",
    "render_scene",
    "write_pfm",
    "write_sample",
]
