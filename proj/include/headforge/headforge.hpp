// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "headforge/bvh.hpp"
#include "headforge/camera.hpp"
#include "headforge/checkpoint.hpp"
#include "headforge/config.hpp"
#include "headforge/dmtet.hpp"
#include "headforge/error.hpp"
#include "headforge/field.hpp"
#include "headforge/guidance.hpp"
#include "headforge/head_prior.hpp"
#include "headforge/image.hpp"
#include "headforge/mesh.hpp"
#include "headforge/optim.hpp"
#include "headforge/pipeline.hpp"
#include "headforge/remote.hpp"
#include "headforge/renderer.hpp"
#include "headforge/rng.hpp"
#include "headforge/schedule.hpp"
#include "headforge/vec.hpp"
