#pragma once

#include "lmdepth/app.hpp"
#include "lmdepth/config.hpp"
#include "lmdepth/dataset.hpp"
#include "lmdepth/gradcheck.hpp"
#include "lmdepth/image_io.hpp"
#include "lmdepth/losses.hpp"
#include "lmdepth/metrics.hpp"
#include "lmdepth/model.hpp"
#include "lmdepth/ptq.hpp"
#include "lmdepth/ssm.hpp"
#include "lmdepth/train.hpp"
#include "lmdepth/weight_file.hpp"
