#ifndef EMBRE_EMBRE_HPP
#define EMBRE_EMBRE_HPP

#include "embre/common.hpp"
#include "embre/corpus.hpp"
#include "embre/tokenizer.hpp"
#include "embre/masking.hpp"
#include "embre/numerics/tensor.hpp"
#include "embre/numerics/ops.hpp"
#include "embre/numerics/adam.hpp"
#include "embre/model.hpp"
#include "embre/eval.hpp"
#include "embre/checkpoint.hpp"
#include "embre/pipeline.hpp"
#include "embre/config.hpp"

#endif  // EMBRE_EMBRE_HPP
