#pragma once

#include "mesa/error.hpp"
#include "mesa/matrix.hpp"
#include "mesa/rng.hpp"
#include "mesa/linalg.hpp"
#include "mesa/tape.hpp"
#include "mesa/mesa_kernel.hpp"
#include "mesa/attention.hpp"
#include "mesa/seqgen.hpp"
#include "mesa/model.hpp"
#include "mesa/constructions.hpp"
#include "mesa/train.hpp"
#include "mesa/analyze.hpp"
#include "mesa/io.hpp"
#include "mesa/verify.hpp"
#include "mesa/cli.hpp"
