#pragma once

// Everything in one include.

#include "mixling/checkpoint.hpp"
#include "mixling/common.hpp"
#include "mixling/corpus.hpp"
#include "mixling/decoding.hpp"
#include "mixling/experiments.hpp"
#include "mixling/model.hpp"
#include "mixling/objectives.hpp"
#include "mixling/rouge.hpp"
#include "mixling/training.hpp"
#include "mixling/vocab.hpp"
