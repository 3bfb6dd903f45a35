from .idx import LabeledImages, load_mnist, read_idx, read_idx_real, write_idx, write_idx_real
from .synthetic import DotAnnotation, TwoRegionSpec, gaussian_dot_targets, gen_two_region, read_points, write_points
from .variants import VARIANTS, gen_mnist_m, gen_mnist_p, gen_mnist_s, gen_mnist_v, load_backgrounds
