#pragma once

#include <cstdint>

#include "mossfuse/imagery.hpp"

namespace moss {

// Procedural ground-truth cube for desk-scale experiments: a small set of
// smooth endmember spectra mixed by spatially structured abundance fields
// (Gaussian blobs plus mid-frequency sinusoids), min-max normalized to [0,1].
SpectralImage make_phantom(int height, int width, int bands, std::uint64_t seed,
                           int endmembers = 4);

}  // namespace moss
