# Motion artifact bias experiments: k-space simulation, curriculum training, statistics
