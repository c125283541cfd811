#pragma once

#include "milattn/checkpoint.hpp"
#include "milattn/classifier.hpp"
#include "milattn/common.hpp"
#include "milattn/datamodel.hpp"
#include "milattn/dataset_io.hpp"
#include "milattn/evaluation.hpp"
#include "milattn/model.hpp"
#include "milattn/pooling.hpp"
#include "milattn/training.hpp"
