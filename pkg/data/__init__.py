"""Well observations, dataset IO and the synthetic asset generator"""
