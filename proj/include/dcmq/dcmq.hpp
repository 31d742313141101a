#pragma once

#include "dcmq/errors.hpp"
#include "dcmq/evalkit.hpp"
#include "dcmq/index_search.hpp"
#include "dcmq/io_formats.hpp"
#include "dcmq/labels.hpp"
#include "dcmq/numerics.hpp"
#include "dcmq/quantizer.hpp"
#include "dcmq/student.hpp"
#include "dcmq/synth.hpp"
#include "dcmq/teacher_targets.hpp"
