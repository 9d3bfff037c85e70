#pragma once

// c10's glog-fallback logging macros collide with doctest's short assertion
// names, so torch has to be pulled in (and its macros evicted) before doctest.
#include <torch/torch.h>

#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include <doctest.h>
