# Tools package: matrix storage plus the rounding, sketch, bound, experiment and verify tools
