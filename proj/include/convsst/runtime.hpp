#pragma once

namespace convsst {

/// Applies the CONVSST_THREADS cap to Eigen's kernel threads and returns the
/// thread count in effect.
int configure_threads();

}  // namespace convsst
