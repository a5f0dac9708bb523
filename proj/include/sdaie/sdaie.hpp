#pragma once

#include "sdaie/augment.hpp"
#include "sdaie/backbone.hpp"
#include "sdaie/binary.hpp"
#include "sdaie/checkpoint.hpp"
#include "sdaie/common.hpp"
#include "sdaie/dataset.hpp"
#include "sdaie/eval.hpp"
#include "sdaie/exif.hpp"
#include "sdaie/filterbank.hpp"
#include "sdaie/gmm.hpp"
#include "sdaie/image.hpp"
#include "sdaie/metrics.hpp"
#include "sdaie/nn.hpp"
#include "sdaie/optim.hpp"
#include "sdaie/pretext.hpp"
#include "sdaie/synthetic.hpp"
