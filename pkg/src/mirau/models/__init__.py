from .student import StudentConfig, StudentNet, cnn_only_variant
from .teacher import TeacherConfig, TeacherNet, patchify, sample_patch_mask

__all__ = ["StudentConfig", "StudentNet", "TeacherConfig", "TeacherNet", "cnn_only_variant",
           "patchify", "sample_patch_mask"]
