#pragma once

#include <diego/commands.hpp>
#include <diego/database_io.hpp>
#include <diego/errors.hpp>
#include <diego/evaluation.hpp>
#include <diego/knn.hpp>
#include <diego/network.hpp>
#include <diego/pipeline.hpp>
#include <diego/synthetic.hpp>
#include <diego/types.hpp>
#include <diego/util.hpp>
