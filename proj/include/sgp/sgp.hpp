#ifndef SGP_SGP_HPP
#define SGP_SGP_HPP

#include "errors.hpp"
#include "linalg.hpp"
#include "kernel.hpp"
#include "random.hpp"
#include "model.hpp"
#include "data.hpp"
#include "bounds_vi.hpp"
#include "bounds_pep.hpp"
#include "synthetic.hpp"
#include "objectives.hpp"
#include "training.hpp"
#include "predict.hpp"
#include "verify.hpp"

#endif
