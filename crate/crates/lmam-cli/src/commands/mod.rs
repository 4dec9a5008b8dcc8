pub mod bench;
pub mod compare;
pub mod gen_data;
pub mod grad_check;
pub mod param_count;
pub mod rank_sweep;
pub mod train_eval;
