def custom_function(required_arg: str, optional_arg: int = 0):
    """The description of this custom function"""
    print("message to the caller agent.")
    return [{"status": "success", "msg": "execution status message."},
            {"bot": "a response to the user."},
            {"arg": "argument_name", "value": 100}]
