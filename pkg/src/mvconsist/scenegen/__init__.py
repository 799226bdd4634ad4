from .scenes import (
    Primitive,
    SceneError,
    SceneSpec,
    Texture,
    TrajectorySpec,
    VideoSample,
    cast_rays,
    gt_correspondences,
    random_sample,
    random_scene,
    random_trajectory,
    render,
    render_view,
)
from .dataset import (
    DatasetParseError,
    DatasetReader,
    decode_sample,
    encode_sample,
    read_dataset,
    write_dataset,
)
